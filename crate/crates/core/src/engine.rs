//! The search loop: algorithm selection, proposer choice, proposal,
//! evaluation, reflection, bookkeeping, and backpropagation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_client::{CallKind, ChatClient, ChatMessage, LlmError};
use crate::objective::{EvalError, Evaluator};
use crate::proposer_bo::{self, BoError, CandidateSource};
use crate::proposer_llm::{
    build_reflection_prompt, build_tuning_prompt, choose_directive, format_reminder,
    parse_reflection_response, parse_tuning_response, select_memory, synthesize_bo_summary,
    Directive, Episode, Memory, TaskContext, TrialOutcome,
};
use crate::selector::{choose_with, Proposer, ProposerState};
use crate::space::{Configuration, ParamValue, SearchSpace, SpaceError};
use crate::surrogate::{algorithm_prior, AlgoDataset, FitOptions, GpModel, KernelParams};
use crate::tree::{compute_reward, ActionLabel, NodeId, NodeKind, Tree, TreeError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProposerMode {
    /// Data-driven switch between BO and the LLM.
    Hybrid,
    BoOnly,
    LlmOnly,
    /// BO with a constant probability.
    Fixed(f64),
}

impl ProposerMode {
    pub fn uses_llm(self) -> bool {
        !matches!(self, ProposerMode::BoOnly)
    }
}

impl fmt::Display for ProposerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProposerMode::Hybrid => f.write_str("hybrid"),
            ProposerMode::BoOnly => f.write_str("bo"),
            ProposerMode::LlmOnly => f.write_str("llm"),
            ProposerMode::Fixed(p) => write!(f, "fixed:{p}"),
        }
    }
}

impl FromStr for ProposerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hybrid" => Ok(ProposerMode::Hybrid),
            "bo" | "bo_only" => Ok(ProposerMode::BoOnly),
            "llm" | "llm_only" => Ok(ProposerMode::LlmOnly),
            _ => {
                let p = s
                    .strip_prefix("fixed:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .ok_or_else(|| format!("unknown mode `{s}` (hybrid, bo, llm, fixed:p)"))?;
                if (0.0..=1.0).contains(&p) {
                    Ok(ProposerMode::Fixed(p))
                } else {
                    Err(format!("fixed probability {p} outside [0, 1]"))
                }
            }
        }
    }
}

impl Serialize for ProposerMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ProposerMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub budget: usize,
    pub c_puct: f64,
    /// Samples per algorithm for the softmax prior.
    pub prior_samples: usize,
    pub epsilon: f64,
    pub warmups: u32,
    pub seed: u64,
    pub mode: ProposerMode,
    /// Up to this many observations every new one triggers a full refit.
    pub full_refit_limit: usize,
    /// Past `full_refit_limit`, hyperparameters are re-optimized every this
    /// many observations; in between the model only re-conditions.
    pub refit_every: usize,
    pub parse_retries: usize,
    /// Adds wall-clock fields to history records, which makes them
    /// non-reproducible.
    pub record_timing: bool,
    /// Ends the run early once the incumbent reaches this value.
    pub stop_at: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            budget: 300,
            c_puct: std::f64::consts::SQRT_2,
            prior_samples: 100,
            epsilon: crate::selector::DEFAULT_EPSILON,
            warmups: 3,
            seed: 0,
            mode: ProposerMode::Hybrid,
            full_refit_limit: 50,
            refit_every: 5,
            parse_retries: 2,
            record_timing: false,
            stop_at: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.budget == 0 {
            return bad("budget must be at least 1");
        }
        if !(self.c_puct.is_finite() && self.c_puct > 0.0) {
            return bad("c_puct must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if self.prior_samples == 0 || self.refit_every == 0 {
            return bad("prior_samples and refit_every must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("evaluator failure: {0}")]
    Evaluator(EvalError),
    #[error("LLM failure: {0}")]
    Llm(LlmError),
    #[error("observer failed: {0}")]
    Observer(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Bo(#[from] BoError),
}

/// One successful evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// 1-based loop iteration; failed evaluations leave gaps.
    pub iteration: usize,
    pub algorithm: String,
    pub config: BTreeMap<String, ParamValue>,
    pub y: f64,
    pub proposer: Proposer,
    pub action: ActionLabel,
    pub parent: NodeId,
    pub node: NodeId,
    /// Probability of choosing BO that was in effect for this algorithm.
    pub p_bo: f64,
    pub p_bo_updated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Observations of this algorithm before this one.
    pub dataset_size: usize,
    pub reward: u64,
    pub best_so_far: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directive: Option<Directive>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    pub llm_calls: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<serde_json::Map<String, serde_json::Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub algorithm: String,
    pub config: BTreeMap<String, ParamValue>,
    pub y: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best: Option<Incumbent>,
    pub budget: usize,
    pub evaluations: usize,
    pub failed_evaluations: usize,
    /// Fraction of successful evaluations per algorithm.
    pub allocation: BTreeMap<String, f64>,
    /// (iteration, new p_BO) at every update, per algorithm.
    pub p_bo_trajectories: BTreeMap<String, Vec<(usize, f64)>>,
    pub llm_calls: u64,
    pub fallbacks: BTreeMap<String, usize>,
    pub mode: ProposerMode,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub history: Vec<TrialRecord>,
    pub tree: Tree,
}

struct Proposal {
    config: Configuration,
    parent: NodeId,
    action: ActionLabel,
    proposer: Proposer,
    directive: Option<Directive>,
    thought: String,
    memory: Memory,
    fallback: Option<&'static str>,
}

#[derive(Default)]
struct CallStats {
    calls: u32,
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl CallStats {
    fn chat(
        &mut self,
        llm: &dyn ChatClient,
        messages: &[ChatMessage],
        kind: CallKind,
    ) -> Result<String, LlmError> {
        self.calls += 1;
        let reply = llm.chat(messages, kind)?;
        self.prompt_tokens += reply.prompt_tokens;
        self.completion_tokens += reply.completion_tokens;
        Ok(reply.content)
    }
}

struct Engine<'a> {
    space: &'a SearchSpace,
    llm: Option<&'a dyn ChatClient>,
    ctx: &'a TaskContext,
    cfg: &'a RunConfig,
    tree: Tree,
    datasets: Vec<AlgoDataset>,
    models: Vec<Option<GpModel>>,
    episodes: Vec<Vec<Episode>>,
    selector: ProposerState,
    prior_rng: ChaCha8Rng,
    choice_rng: ChaCha8Rng,
    bo_rng: ChaCha8Rng,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

impl<'a> Engine<'a> {
    fn node_config(&self, id: NodeId) -> Option<(&Configuration, f64)> {
        let n = self.tree.node(id);
        match (n.kind, &n.config, n.y) {
            (NodeKind::Hp, Some(c), Some(y)) => Some((c, y)),
            _ => None,
        }
    }

    fn bo_proposal(&mut self, alg: usize, fallback: Option<&'static str>) -> Result<Proposal, EngineError> {
        let algo_node = self.tree.algo_node(alg);
        let pool = proposer_bo::generate_candidates(&self.tree, algo_node, self.space, &mut self.bo_rng)?;
        let best = self.datasets[alg].best().unwrap_or(f64::NEG_INFINITY);
        let idx = proposer_bo::propose(&pool, self.models[alg].as_ref(), best, self.space, &mut self.bo_rng)?;
        let winner = pool.into_iter().nth(idx).expect("index from pool");
        let action = match winner.source {
            CandidateSource::Random => ActionLabel::BoRandom,
            CandidateSource::Local => ActionLabel::BoLocal,
        };
        Ok(Proposal {
            config: winner.config,
            parent: winner.parent,
            action,
            proposer: Proposer::Bo,
            directive: None,
            thought: String::new(),
            memory: Memory::default(),
            fallback,
        })
    }

    fn random_proposal(&mut self, alg: usize, fallback: &'static str) -> Result<Proposal, EngineError> {
        let id = self.space.algorithms[alg].id.clone();
        Ok(Proposal {
            config: self.space.sample_random(&id, &mut self.bo_rng)?,
            parent: self.tree.algo_node(alg),
            action: ActionLabel::BoRandom,
            proposer: Proposer::Bo,
            directive: None,
            thought: String::new(),
            memory: Memory::default(),
            fallback: Some(fallback),
        })
    }

    fn llm_proposal(&mut self, alg: usize, stats: &mut CallStats) -> Result<Proposal, EngineError> {
        let llm = self.llm.expect("checked before the loop");
        let alg_id = self.space.algorithms[alg].id.clone();
        let algo_node = self.tree.algo_node(alg);
        let leaf = match self.tree.select_hp_leaf(algo_node, self.cfg.c_puct, self.cfg.warmups) {
            Ok(leaf) => leaf,
            Err(TreeError::NoLeaf(_)) => return self.random_proposal(alg, "no_leaf"),
            Err(e) => return Err(e.into()),
        };
        let directive = choose_directive(self.tree.node(leaf), self.cfg.warmups)
            .map_err(|e| EngineError::Config(e.to_string()))?;
        let (base, memory) = if directive == Directive::Warmup {
            (None, Memory::default())
        } else {
            let params = self.models[alg].as_ref().map(|m| m.params().clone()).unwrap_or_else(|| {
                KernelParams::default_for(self.space.algorithms[alg].n_cont())
            });
            let memory = select_memory(&self.episodes[alg], &self.tree, leaf, &params, self.space)?;
            (self.tree.node(leaf).config.clone(), memory)
        };
        let mut messages =
            build_tuning_prompt(self.ctx, self.space, &alg_id, &memory, base.as_ref(), directive)?;
        for attempt in 0..=self.cfg.parse_retries {
            let reply = match stats.chat(llm, &messages, CallKind::Tuning) {
                Ok(r) => r,
                Err(e) if self.cfg.mode == ProposerMode::LlmOnly => return Err(EngineError::Llm(e)),
                Err(e) => {
                    log::warn!("tuning call failed, using BO instead: {e}");
                    return self.bo_proposal(alg, Some("llm_error"));
                }
            };
            match parse_tuning_response(&reply, self.space, &alg_id) {
                Ok(p) => {
                    return Ok(Proposal {
                        config: p.config,
                        parent: leaf,
                        action: directive.action(),
                        proposer: Proposer::Llm,
                        directive: Some(directive),
                        thought: p.thought,
                        memory,
                        fallback: None,
                    })
                }
                Err(e) => {
                    log::debug!("unusable tuning reply (attempt {}): {e}", attempt + 1);
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(format_reminder(self.space, &alg_id, &e)));
                }
            }
        }
        self.bo_proposal(alg, Some("parse_failure"))
    }

    fn reflect(
        &mut self,
        alg: usize,
        proposal: &Proposal,
        y: f64,
        stats: &mut CallStats,
    ) -> Result<String, EngineError> {
        let base = self.node_config(proposal.parent).map(|(c, y)| (c.clone(), y));
        let base_ref = base.as_ref().map(|(c, y)| (c, *y));
        if proposal.proposer == Proposer::Bo {
            return Ok(synthesize_bo_summary(base_ref, (&proposal.config, y), &self.space.metric));
        }
        let better = self.datasets[alg].rows.iter().filter(|r| r.y > y).count();
        let trial = TrialOutcome {
            base: base_ref,
            new: (&proposal.config, y),
            rationale: &proposal.thought,
            rank: (better + 1, self.datasets[alg].len() + 1),
        };
        let messages = build_reflection_prompt(self.ctx, self.space, &proposal.memory, &trial);
        let llm = self.llm.expect("LLM proposals need a client");
        match stats.chat(llm, &messages, CallKind::Reflection) {
            Ok(reply) => {
                let (_, summary) = parse_reflection_response(&reply);
                Ok(if summary.is_empty() { "no reflection".to_string() } else { summary })
            }
            Err(e) if self.cfg.mode == ProposerMode::LlmOnly => Err(EngineError::Llm(e)),
            Err(e) => {
                log::warn!("reflection call failed: {e}");
                Ok(synthesize_bo_summary(base_ref, (&proposal.config, y), &self.space.metric))
            }
        }
    }

    fn refit(&mut self, alg: usize, iteration: usize) {
        let data = &self.datasets[alg];
        let n = data.len();
        if n < 2 {
            return;
        }
        let seed = self.cfg.seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let warm = self.models[alg].as_ref().map(|m| m.params().clone());
        let opts = if n <= self.cfg.full_refit_limit {
            FitOptions { seed, warm_start: warm, ..FitOptions::default() }
        } else if n % self.cfg.refit_every == 0 || warm.is_none() {
            FitOptions::incremental(warm, seed)
        } else {
            let prev = self.models[alg].as_ref().expect("warm start implies a model");
            let last = data.rows.last().expect("n >= 2");
            if prev.len() + 1 == n {
                if let Ok(m) = prev.extended(last.x.clone(), last.y) {
                    self.models[alg] = Some(m);
                    return;
                }
            }
            FitOptions::fixed(warm.expect("checked above"))
        };
        match GpModel::fit_with(data, &opts) {
            Ok(m) => self.models[alg] = Some(m),
            Err(e) => log::warn!("surrogate refit for `{}` failed, keeping the previous model: {e}", data.algorithm),
        }
    }
}

/// Runs the loop for `cfg.budget` iterations. `observer` sees every record as
/// soon as it exists; its error aborts the run.
pub fn run(
    space: &SearchSpace,
    evaluator: &mut dyn Evaluator,
    llm: Option<&dyn ChatClient>,
    ctx: &TaskContext,
    cfg: &RunConfig,
    observer: &mut dyn FnMut(&TrialRecord) -> Result<(), String>,
) -> Result<RunOutcome, EngineError> {
    cfg.validate()?;
    if cfg.mode.uses_llm() && llm.is_none() {
        return Err(EngineError::Config(format!("mode {} needs an LLM client", cfg.mode)));
    }
    let k = space.len();
    let mut eng = Engine {
        space,
        llm,
        ctx,
        cfg,
        tree: Tree::new(space.algorithm_ids()),
        datasets: space.algorithms.iter().map(|a| AlgoDataset::new(a.id.clone())).collect(),
        models: vec![None; k],
        episodes: vec![Vec::new(); k],
        selector: ProposerState::new(k, cfg.epsilon),
        prior_rng: stream(cfg.seed, 1),
        choice_rng: stream(cfg.seed, 2),
        bo_rng: stream(cfg.seed, 3),
    };
    let mut history = Vec::new();
    let mut best: Option<Incumbent> = None;
    let mut failed = 0;
    let mut llm_calls = 0u64;
    let mut fallbacks: BTreeMap<String, usize> = BTreeMap::new();
    let mut trajectories: BTreeMap<String, Vec<(usize, f64)>> =
        space.algorithms.iter().map(|a| (a.id.clone(), Vec::new())).collect();

    for iteration in 1..=cfg.budget {
        let started = Instant::now();
        let model_refs: Vec<Option<&GpModel>> = eng.models.iter().map(Option::as_ref).collect();
        let priors = algorithm_prior(&model_refs, space, cfg.prior_samples, &mut eng.prior_rng);
        let alg = eng.tree.select_algorithm(&priors, cfg.c_puct);
        let alg_id = space.algorithms[alg].id.clone();

        let mut tau = None;
        let p = match cfg.mode {
            ProposerMode::Hybrid => {
                let params = eng.models[alg].as_ref().map(|m| m.params().clone());
                tau = eng.selector.maybe_update(alg, &eng.datasets[alg], cfg.seed ^ iteration as u64, params.as_ref());
                if tau.is_some() {
                    trajectories.get_mut(&alg_id).expect("known id").push((iteration, eng.selector.p_bo(alg)));
                }
                eng.selector.p_bo(alg)
            }
            ProposerMode::BoOnly => 1.0,
            ProposerMode::LlmOnly => 0.0,
            ProposerMode::Fixed(p) => p,
        };
        let choice = choose_with(p, &mut eng.choice_rng);

        let mut stats = CallStats::default();
        let proposal = match choice {
            Proposer::Bo => eng.bo_proposal(alg, None)?,
            Proposer::Llm => eng.llm_proposal(alg, &mut stats)?,
        };
        if let Some(f) = proposal.fallback {
            *fallbacks.entry(f.to_string()).or_default() += 1;
        }

        let result = match evaluator.evaluate(&proposal.config) {
            Ok(r) => r,
            Err(e) if e.is_fatal() => return Err(EngineError::Evaluator(e)),
            Err(e) => {
                log::warn!("iteration {iteration}: {e}; skipping");
                failed += 1;
                llm_calls += stats.calls as u64;
                continue;
            }
        };
        let y = result.y;
        let summary = eng.reflect(alg, &proposal, y, &mut stats)?;
        llm_calls += stats.calls as u64;

        let dataset_size = eng.datasets[alg].len();
        let parent_pair = eng.node_config(proposal.parent).map(|(c, y)| (c.clone(), y));
        let node = eng.tree.add_child(proposal.parent, proposal.config.clone(), proposal.action)?;
        eng.tree.set_outcome(node, y, Some(summary.clone()));
        eng.episodes[alg].push(Episode {
            parent_config: parent_pair.as_ref().map(|(c, _)| c.clone()),
            parent_y: parent_pair.map(|(_, y)| y),
            child_config: proposal.config.clone(),
            child_y: y,
            reflection: summary,
            child_node: node,
            action: proposal.action,
        });
        let encoded = space.encode(&proposal.config)?;
        eng.datasets[alg].push(encoded, y);
        eng.selector.observe(alg);
        eng.refit(alg, iteration);

        let reward = compute_reward(y, eng.tree.root_best());
        eng.tree.backpropagate(node, reward, y);

        if best.as_ref().is_none_or(|b| y > b.y) {
            best = Some(Incumbent {
                algorithm: alg_id.clone(),
                config: proposal.config.values.clone(),
                y,
                iteration,
            });
        }
        let record = TrialRecord {
            iteration,
            algorithm: alg_id,
            config: proposal.config.values,
            y,
            proposer: proposal.proposer,
            action: proposal.action,
            parent: proposal.parent,
            node,
            p_bo: p,
            p_bo_updated: tau.is_some(),
            tau,
            dataset_size,
            reward,
            best_so_far: best.as_ref().map_or(y, |b| b.y),
            directive: proposal.directive,
            fallback: proposal.fallback.map(str::to_string),
            llm_calls: stats.calls,
            prompt_tokens: stats.prompt_tokens,
            completion_tokens: stats.completion_tokens,
            aux: result.aux,
            timestamp: cfg.record_timing.then(unix_now),
            wall_time: cfg.record_timing.then(|| started.elapsed().as_secs_f64()),
        };
        observer(&record).map_err(EngineError::Observer)?;
        history.push(record);
        if cfg.stop_at.is_some_and(|target| best.as_ref().is_some_and(|b| b.y >= target)) {
            break;
        }
    }

    let evaluations = history.len();
    let mut allocation: BTreeMap<String, f64> =
        space.algorithms.iter().map(|a| (a.id.clone(), 0.0)).collect();
    for r in &history {
        *allocation.get_mut(&r.algorithm).expect("known id") += 1.0 / evaluations as f64;
    }
    let summary = RunSummary {
        best,
        budget: cfg.budget,
        evaluations,
        failed_evaluations: failed,
        allocation,
        p_bo_trajectories: trajectories,
        llm_calls,
        fallbacks,
        mode: cfg.mode,
        seed: cfg.seed,
    };
    Ok(RunOutcome { summary, history, tree: eng.tree })
}

