//! LLM proposer: tuning memory, directives, prompt rendering, and response
//! parsing for both the tuning and the reflection call.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::llm_client::ChatMessage;
use crate::space::{Configuration, ParamKind, ParamValue, SearchSpace, SpaceError, TaskKind};
use crate::surrogate::{kernel, KernelParams};
use crate::tree::{ActionLabel, NodeId, NodeKind, Tree, TreeNode};

pub const GLOBAL_MEMORY_CAP: usize = 10;

const TUNING_SYSTEM: &str = include_str!("../templates/tuning_system.txt");
const TUNING_USER: &str = include_str!("../templates/tuning_user.txt");
const REFLECTION_SYSTEM: &str = include_str!("../templates/reflection_system.txt");
const REFLECTION_USER: &str = include_str!("../templates/reflection_user.txt");

/// Fixed strings shared by the templates, the parser and the mock client.
pub mod markers {
    pub const TASK: &str = "Task Description:";
    pub const DATASET: &str = "Dataset Context:";
    pub const MEMORY: &str = "Selective Tuning Memory:";
    pub const OUTPUT: &str = "Required Output Format:";
    pub const TRAJECTORY: &str = "Optimization Trajectory Context:";
    pub const TRIALS: &str = "Informative Historical Trials:";
    pub const BASE_HEADER: &str = "The Basic Configuration to Build Upon:";
    pub const SPACE_HEADER: &str = "Search space (every value must stay inside it):";
    pub const GOAL_PREFIX: &str = "Your current strategic goal is ";
    pub const TRIAL_HEADER: &str = "The Trial to Analyze:";
    pub const THOUGHT: &str = "Thought";
    pub const ACTION: &str = "Action";
    pub const SUMMARY: &str = "Reflection Summary";
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposerError {
    #[error("node is fully expanded by the LLM proposer")]
    FullyExpanded,
    #[error("no JSON object in response")]
    NoJson,
    #[error("parameter `{0}` missing from response")]
    MissingParam(String),
    #[error("parameter `{param}`: {reason}")]
    InvalidValue { param: String, reason: String },
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    Warmup,
    Exploration,
    Exploitation,
}

impl Directive {
    pub fn mode(self) -> &'static str {
        match self {
            Directive::Warmup => "WARMUP",
            Directive::Exploration => "EXPLORATION",
            Directive::Exploitation => "EXPLOITATION",
        }
    }

    pub fn instruction(self) -> &'static str {
        match self {
            Directive::Warmup => {
                "Propose a promising configuration from scratch. Focus on identifying configurations that are \
                 distinct from previous attempts while still demonstrating strong performance. Analyze historical \
                 data to balance novelty and effectiveness."
            }
            Directive::Exploration => {
                "Modify the basic configuration to explore new areas of the hyperparameter space. Focus on making \
                 changes that introduce diversity and help uncover potentially high-performing configurations. \
                 Make bold adjustments to discover new possibilities."
            }
            Directive::Exploitation => {
                "Refine and optimize the basic configuration to achieve peak performance. Focus on making minor, \
                 incremental adjustments to the basic configuration, guiding it towards a more optimal setup using \
                 insights from successful trials."
            }
        }
    }

    pub fn action(self) -> ActionLabel {
        match self {
            Directive::Warmup => ActionLabel::LlmWarmup,
            Directive::Exploration => ActionLabel::LlmExploration,
            Directive::Exploitation => ActionLabel::LlmExploitation,
        }
    }
}

/// Warmup on algo nodes, then exploration before exploitation on hp nodes.
pub fn choose_directive(leaf: &TreeNode, warmups: u32) -> Result<Directive, ProposerError> {
    match leaf.kind {
        NodeKind::Algo if leaf.warmup_count < warmups => Ok(Directive::Warmup),
        NodeKind::Hp if !leaf.directives_done.exploration => Ok(Directive::Exploration),
        NodeKind::Hp if !leaf.directives_done.exploitation => Ok(Directive::Exploitation),
        _ => Err(ProposerError::FullyExpanded),
    }
}

/// Description of the dataset shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskContext {
    pub description: String,
    pub task: TaskKind,
    pub metric: String,
    pub n_samples: Option<usize>,
    pub n_features: Option<usize>,
    pub class_distribution: Option<String>,
}

impl TaskContext {
    pub fn for_space(space: &SearchSpace, description: impl Into<String>) -> Self {
        Self {
            description: description.into(),
            task: space.task,
            metric: space.metric.clone(),
            n_samples: None,
            n_features: None,
            class_distribution: None,
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "Task type: {}.\nOptimization metric: {} (higher is better).\n{}",
            self.task, self.metric, self.description
        );
        if let (Some(n), Some(f)) = (self.n_samples, self.n_features) {
            out.push_str(&format!("\nSize: {n} samples, {f} features."));
        }
        if let Some(c) = &self.class_distribution {
            out.push_str(&format!("\nClass distribution: {c}."));
        }
        out
    }
}

/// One parent → child edge of the tree with its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub parent_config: Option<Configuration>,
    pub parent_y: Option<f64>,
    pub child_config: Configuration,
    pub child_y: f64,
    pub reflection: String,
    pub child_node: NodeId,
    pub action: ActionLabel,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Memory {
    /// Pareto-optimal in (similarity to the base, child performance).
    pub global: Vec<Episode>,
    /// Episodes along the path from the algorithm node to the base, in order.
    pub local: Vec<Episode>,
}

impl Memory {
    pub fn is_empty(&self) -> bool {
        self.global.is_empty() && self.local.is_empty()
    }
}

/// Indices of points not dominated when maximizing both coordinates.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b].0.total_cmp(&points[a].0).then(points[b].1.total_cmp(&points[a].1))
    });
    let mut front = Vec::new();
    let mut best_prev = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let sim = points[order[i]].0;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == sim {
            j += 1;
        }
        let group_max = points[order[i]].1;
        for &k in &order[i..j] {
            if points[k].1 == group_max && group_max > best_prev {
                front.push(k);
            }
        }
        best_prev = best_prev.max(group_max);
        i = j;
    }
    front.sort_unstable();
    front
}

/// Builds the memory for expanding `base`. `episodes` must all belong to the
/// base's algorithm.
pub fn select_memory(
    episodes: &[Episode],
    tree: &Tree,
    base: NodeId,
    params: &KernelParams,
    space: &SearchSpace,
) -> Result<Memory, SpaceError> {
    let base_cfg = tree.node(base).config.as_ref().ok_or_else(|| {
        SpaceError::InvalidConfig("memory base must be a hyperparameter node".into())
    })?;
    let base_enc = space.encode(base_cfg)?;
    let unit = params.unit_signal();
    let mut points = Vec::with_capacity(episodes.len());
    for e in episodes {
        let start = e.parent_config.as_ref().unwrap_or(&e.child_config);
        let sim = kernel(&space.encode(start)?, &base_enc, &unit)
            .map_err(|_| SpaceError::DimensionMismatch { expected: 0, got: 0 })?;
        points.push((sim, e.child_y));
    }
    let mut front = pareto_front(&points);
    front.sort_by(|&a, &b| points[b].0.total_cmp(&points[a].0).then(a.cmp(&b)));
    front.truncate(GLOBAL_MEMORY_CAP);

    let by_child: HashMap<NodeId, &Episode> = episodes.iter().map(|e| (e.child_node, e)).collect();
    let local = tree
        .path_to(base)
        .into_iter()
        .filter_map(|id| by_child.get(&id).map(|e| (*e).clone()))
        .collect();
    Ok(Memory { global: front.into_iter().map(|i| episodes[i].clone()).collect(), local })
}

fn value_json(v: &ParamValue) -> Value {
    match v {
        ParamValue::Int(i) => Value::from(*i),
        ParamValue::Float(x) => serde_json::Number::from_f64(*x).map(Value::Number).unwrap_or(Value::Null),
        ParamValue::Cat(s) => Value::from(s.as_str()),
    }
}

/// `{"name": value, ...}` in search-space parameter order.
pub fn config_json(config: &Configuration, space: &SearchSpace) -> String {
    let mut parts = Vec::new();
    let names: Vec<&str> = match space.algorithm(&config.algorithm) {
        Ok(alg) => alg.params.iter().map(|p| p.name.as_str()).collect(),
        Err(_) => config.values.keys().map(String::as_str).collect(),
    };
    for name in names {
        if let Some(v) = config.values.get(name) {
            parts.push(format!("{}: {}", Value::from(name), value_json(v)));
        }
    }
    format!("{{{}}}", parts.join(", "))
}

fn perf(y: f64) -> String {
    serde_json::Number::from_f64(y).map(|n| n.to_string()).unwrap_or_else(|| y.to_string())
}

fn node_json(config: &Configuration, y: f64, reflection: Option<&str>, space: &SearchSpace) -> String {
    let mut s = format!("{{\"performance\": {}, \"configuration\": {}", perf(y), config_json(config, space));
    if let Some(r) = reflection {
        s.push_str(&format!(", \"reflection\": {}", Value::from(r)));
    }
    s.push('}');
    s
}

fn proposer_label(action: ActionLabel) -> &'static str {
    match action {
        ActionLabel::LlmWarmup | ActionLabel::LlmExploration | ActionLabel::LlmExploitation => "LLM",
        ActionLabel::BoRandom => "BO random sampling",
        ActionLabel::BoLocal => "BO local search",
    }
}

fn trial_label(i: usize) -> String {
    if i < 26 {
        char::from(b'A' + i as u8).to_string()
    } else {
        (i + 1).to_string()
    }
}

/// Trajectory and historical-trial blocks of the memory section.
pub fn render_memory(memory: &Memory, space: &SearchSpace) -> (String, String) {
    let trajectory = if memory.local.is_empty() {
        "No trajectory yet: this is a fresh start.".to_string()
    } else {
        let mut lines = vec!["Ancestral path from the algorithm root to the current basic node:".to_string()];
        let last = memory.local.len() - 1;
        for (i, e) in memory.local.iter().enumerate() {
            let label = if i == last { "Current Basic Node" } else { "Ancestral Node" };
            lines.push(format!("- {label}: {}", node_json(&e.child_config, e.child_y, Some(&e.reflection), space)));
        }
        lines.join("\n")
    };
    let trials = if memory.global.is_empty() {
        "No historical trials yet.".to_string()
    } else {
        let mut lines = vec!["High-performing past attempts that started close to the current configuration:".to_string()];
        for (i, e) in memory.global.iter().enumerate() {
            lines.push(format!("Historical Trial {} (proposed by {}):", trial_label(i), proposer_label(e.action)));
            match (&e.parent_config, e.parent_y) {
                (Some(c), Some(y)) => lines.push(format!("- Parent: {}", node_json(c, y, None, space))),
                _ => lines.push("- Parent: none (initial configuration)".to_string()),
            }
            lines.push(format!("- Child: {}", node_json(&e.child_config, e.child_y, None, space)));
            lines.push(format!("- Reflection: {}", Value::from(e.reflection.as_str())));
        }
        lines.join("\n")
    };
    (trajectory, trials)
}

/// Replaces every `{{NAME}}` in one pass so substituted text is never rescanned.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let key = &after[..end];
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[start..start + 2 + end + 2]),
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// One line per parameter in a format the mock client can read back.
pub fn render_space(space: &SearchSpace, algorithm_id: &str) -> Result<String, SpaceError> {
    let alg = space.algorithm(algorithm_id)?;
    let lines: Vec<String> = alg
        .params
        .iter()
        .map(|p| {
            let log = |l: bool| if l { " (Log-Scale)" } else { "" };
            match &p.kind {
                ParamKind::Float { low, high, log: l } => format!("- {}: Float, Range=[{low}, {high}]{}", p.name, log(*l)),
                ParamKind::Int { low, high, log: l } => format!("- {}: Integer, Range=[{low}, {high}]{}", p.name, log(*l)),
                ParamKind::Cat { choices } => {
                    format!("- {}: Categorical, choices={}", p.name, serde_json::to_string(choices).expect("strings"))
                }
            }
        })
        .collect();
    Ok(lines.join("\n"))
}

/// System and user messages for a tuning call. `base` must be `None` exactly
/// for the warmup directive.
pub fn build_tuning_prompt(
    ctx: &TaskContext,
    space: &SearchSpace,
    algorithm_id: &str,
    memory: &Memory,
    base: Option<&Configuration>,
    directive: Directive,
) -> Result<Vec<ChatMessage>, SpaceError> {
    let space_text = render_space(space, algorithm_id)?;
    let base_section = match base {
        Some(b) => format!(
            "\n{}\nThis configuration comes from earlier trials and is a promising place to continue from:\n{}\n",
            markers::BASE_HEADER,
            config_json(b, space)
        ),
        None => String::new(),
    };
    let (trajectory, trials) = render_memory(memory, space);
    let task = ctx.task.to_string();
    let dataset = ctx.render();
    let user = fill(
        TUNING_USER,
        &[
            ("TASK", &task),
            ("ALGORITHM", algorithm_id),
            ("SPACE", &space_text),
            ("BASE_SECTION", &base_section),
            ("MODE", directive.mode()),
            ("INSTRUCTION", directive.instruction()),
            ("DATASET", &dataset),
            ("TRAJECTORY", &trajectory),
            ("TRIALS", &trials),
        ],
    );
    Ok(vec![ChatMessage::system(TUNING_SYSTEM.trim_end()), ChatMessage::user(user.trim_end())])
}

/// Follow-up message asking for a corrected answer after a parse failure.
pub fn format_reminder(space: &SearchSpace, algorithm_id: &str, err: &ProposerError) -> String {
    let names: Vec<String> = space
        .algorithm(algorithm_id)
        .map(|a| a.params.iter().map(|p| format!("\"{}\"", p.name)).collect())
        .unwrap_or_default();
    format!(
        "Your previous reply could not be used ({err}). Answer again with a line starting with \"Thought:\" \
         followed by a line starting with \"Action:\" that holds one JSON object with exactly these keys: {}.",
        names.join(", ")
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmProposal {
    pub thought: String,
    pub config: Configuration,
    pub raw: String,
}

/// Every top-level JSON object in `text` as (start, end, value).
fn json_objects(text: &str) -> Vec<(usize, usize, serde_json::Map<String, Value>)> {
    let mut found = Vec::new();
    let mut i = 0;
    while let Some(off) = text[i..].find('{') {
        let start = i + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                let end = start + stream.byte_offset();
                found.push((start, end, map));
                i = end;
            }
            _ => i = start + 1,
        }
    }
    found
}

fn strip_label(s: &str) -> &str {
    s.trim_start_matches(|c: char| c == ':' || c == '*' || c.is_whitespace()).trim_end()
}

fn coerce(spec: &crate::space::ParamSpec, v: &Value) -> Result<ParamValue, ProposerError> {
    let invalid = |reason: String| ProposerError::InvalidValue { param: spec.name.clone(), reason };
    match &spec.kind {
        ParamKind::Cat { choices } => {
            let s = match v {
                Value::String(s) => s.trim().to_string(),
                Value::Number(n) => n.to_string(),
                Value::Bool(b) => b.to_string(),
                other => return Err(invalid(format!("expected a choice, got {other}"))),
            };
            if choices.contains(&s) {
                Ok(ParamValue::Cat(s))
            } else {
                Err(invalid(format!("`{s}` is not one of {choices:?}")))
            }
        }
        kind => {
            let x = match v {
                Value::Number(n) => n.as_f64(),
                Value::String(s) => s.trim().parse::<f64>().ok(),
                _ => None,
            }
            .filter(|x| x.is_finite())
            .ok_or_else(|| invalid(format!("expected a number, got {v}")))?;
            Ok(match kind {
                ParamKind::Float { low, high, .. } => ParamValue::Float(x.clamp(*low, *high)),
                ParamKind::Int { low, high, .. } => {
                    ParamValue::Int((x.round() as i64).clamp(*low, *high))
                }
                ParamKind::Cat { .. } => unreachable!(),
            })
        }
    }
}

/// Extracts the configuration from a tuning reply: the last JSON object after
/// the last "Action" marker, or else the last JSON object anywhere. Numbers
/// are clipped into range, unknown keys ignored.
pub fn parse_tuning_response(
    text: &str,
    space: &SearchSpace,
    algorithm_id: &str,
) -> Result<LlmProposal, ProposerError> {
    let alg = space.algorithm(algorithm_id)?;
    let objects = json_objects(text);
    let action_pos = text.rfind(markers::ACTION);
    let chosen = action_pos
        .and_then(|pos| objects.iter().rev().find(|(s, _, _)| *s >= pos))
        .or_else(|| objects.last())
        .ok_or(ProposerError::NoJson)?;
    let map = &chosen.2;
    let mut values = std::collections::BTreeMap::new();
    for p in &alg.params {
        let v = map.get(&p.name).ok_or_else(|| ProposerError::MissingParam(p.name.clone()))?;
        values.insert(p.name.clone(), coerce(p, v)?);
    }
    let config = Configuration { algorithm: alg.id.clone(), values };
    space.validate(&config)?;

    let thought_end = action_pos.unwrap_or(chosen.0).min(chosen.0);
    let thought = match text[..thought_end].find(markers::THOUGHT) {
        Some(t) => strip_label(&text[t + markers::THOUGHT.len()..thought_end]),
        None => text[..thought_end].trim(),
    };
    Ok(LlmProposal { thought: thought.to_string(), config, raw: text.to_string() })
}

/// Signed relative change such as `+3.09%`, `-0.97%` or `0.00%`.
pub fn relative_change(base: f64, new: f64) -> String {
    if base == 0.0 {
        return if new == base { "0.00%".into() } else { "n/a".into() };
    }
    let pct = (new - base) / base.abs() * 100.0;
    let s = format!("{:.2}", pct.abs());
    if s == "0.00" {
        "0.00%".into()
    } else if pct > 0.0 {
        format!("+{s}%")
    } else {
        format!("-{s}%")
    }
}

/// Inputs describing the trial that a reflection call analyzes.
#[derive(Debug, Clone, Copy)]
pub struct TrialOutcome<'a> {
    pub base: Option<(&'a Configuration, f64)>,
    pub new: (&'a Configuration, f64),
    pub rationale: &'a str,
    /// (1-based position among the algorithm's trials, number of trials).
    pub rank: (usize, usize),
}

pub fn build_reflection_prompt(
    ctx: &TaskContext,
    space: &SearchSpace,
    memory: &Memory,
    trial: &TrialOutcome<'_>,
) -> Vec<ChatMessage> {
    let (new_cfg, new_y) = trial.new;
    let (base_config, base_perf, change) = match trial.base {
        Some((c, y)) => (config_json(c, space), perf(y), relative_change(y, new_y)),
        None => ("none (initial configuration of a new trajectory)".into(), "n/a".into(), "n/a".into()),
    };
    let (trajectory, trials) = render_memory(memory, space);
    let rationale = if trial.rationale.trim().is_empty() { "none given" } else { trial.rationale.trim() };
    let task = ctx.task.to_string();
    let new_config = config_json(new_cfg, space);
    let new_perf = perf(new_y);
    let (rank, total) = (trial.rank.0.to_string(), trial.rank.1.to_string());
    let dataset = ctx.render();
    let user = fill(
        REFLECTION_USER,
        &[
            ("TASK", &task),
            ("ALGORITHM", &new_cfg.algorithm),
            ("BASE_CONFIG", &base_config),
            ("BASE_PERF", &base_perf),
            ("RATIONALE", rationale),
            ("NEW_CONFIG", &new_config),
            ("NEW_PERF", &new_perf),
            ("CHANGE", &change),
            ("RANK", &rank),
            ("TOTAL", &total),
            ("DATASET", &dataset),
            ("TRAJECTORY", &trajectory),
            ("TRIALS", &trials),
        ],
    );
    vec![ChatMessage::system(REFLECTION_SYSTEM.trim_end()), ChatMessage::user(user.trim_end())]
}

/// Splits a reflection reply into (reflection, summary) at the last
/// "Reflection Summary" marker. Without a marker the whole text is the summary.
pub fn parse_reflection_response(text: &str) -> (String, String) {
    match text.rfind(markers::SUMMARY) {
        Some(pos) => {
            let summary = strip_label(&text[pos + markers::SUMMARY.len()..]);
            let head = text[..pos].trim_end().trim_end_matches('*').trim();
            let reflection = head.strip_prefix("**").unwrap_or(head);
            let reflection = reflection.strip_prefix("Reflection").map(strip_label).unwrap_or(reflection);
            (reflection.trim().to_string(), summary.trim().to_string())
        }
        None => (String::new(), text.trim().to_string()),
    }
}

fn fmt_value(v: &ParamValue) -> String {
    match v {
        ParamValue::Float(x) => {
            let s = format!("{x:.6}");
            let s = s.trim_end_matches('0').trim_end_matches('.');
            if s == "0" || s == "-0" { format!("{x:.3e}") } else { s.to_string() }
        }
        other => other.to_string(),
    }
}

/// Template summary used as the reflection of BO-proposed nodes.
pub fn synthesize_bo_summary(
    parent: Option<(&Configuration, f64)>,
    child: (&Configuration, f64),
    metric: &str,
) -> String {
    let (child_cfg, child_y) = child;
    let Some((parent_cfg, parent_y)) = parent else {
        return format!("Initial configuration achieved {metric}={}.", perf(child_y));
    };
    let mut changes = Vec::new();
    for (name, new) in &child_cfg.values {
        let Some(old) = parent_cfg.values.get(name) else { continue };
        if old == new {
            continue;
        }
        let verb = match (old.as_f64(), new.as_f64()) {
            (Some(a), Some(b)) if b > a => "increasing",
            (Some(_), Some(_)) => "decreasing",
            _ => "changing",
        };
        changes.push(format!("{verb} {name} from {} to {}", fmt_value(old), fmt_value(new)));
    }
    let delta = child_y - parent_y;
    let pct = relative_change(parent_y, child_y);
    if changes.is_empty() {
        return format!("No parameter changes; performance delta {delta:+.4} ({pct}).");
    }
    let joined = match changes.len() {
        1 => changes.remove(0),
        _ => {
            let last = changes.pop().unwrap();
            format!("{} and {last}", changes.join(", "))
        }
    };
    let mut sentence = joined;
    sentence[..1].make_ascii_uppercase();
    let outcome = if delta > 0.0 {
        format!("improved {metric} by {:.4} ({pct})", delta)
    } else if delta < 0.0 {
        format!("worsened {metric} by {:.4} ({pct})", -delta)
    } else {
        format!("left {metric} unchanged ({pct})")
    };
    format!("{sentence} {outcome}.")
}

#[cfg(test)]
mod tests;
