//! Chat-completion clients: an OpenAI-compatible HTTP client with retries and
//! a deterministic offline mock.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::proposer_llm::{markers, Directive};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Tuning,
    Reflection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM endpoint unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("LLM request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("LLM endpoint rejected credentials (HTTP {0})")]
    Auth(u16),
    #[error("LLM request failed with HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed LLM response: {0}")]
    BadResponse(String),
    #[error("prompt is missing expected markers: {0}")]
    MalformedPrompt(String),
    #[error("LLM configuration error: {0}")]
    Config(String),
}

pub trait ChatClient: Send + Sync {
    fn chat(&self, messages: &[ChatMessage], kind: CallKind) -> Result<ChatReply, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    /// Base URL; requests go to `<endpoint>/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub temperature_tuning: f64,
    pub temperature_reflection: f64,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub backoff_base_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            temperature_tuning: 0.7,
            temperature_reflection: 0.2,
            timeout_secs: 120.0,
            max_retries: 3,
            api_key_env: "OPENAI_API_KEY".into(),
            backoff_base_ms: 1000,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.timeout_secs > 0.0) {
            return Err(LlmError::Config("timeout must be positive".into()));
        }
        if self.endpoint.is_empty() || self.model.is_empty() {
            return Err(LlmError::Config("endpoint and model are required".into()));
        }
        Ok(())
    }

    pub fn temperature(&self, kind: CallKind) -> f64 {
        match kind {
            CallKind::Tuning => self.temperature_tuning,
            CallKind::Reflection => self.temperature_reflection,
        }
    }

    /// JSON body sent for `messages`; a pure function of its inputs.
    pub fn request_body(&self, messages: &[ChatMessage], kind: CallKind) -> Value {
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature(kind),
        })
    }
}

pub struct HttpChatClient {
    config: LlmConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpChatClient")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Retry(String, bool),
    Fatal(LlmError),
}

impl HttpChatClient {
    pub fn new(config: LlmConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self { config, api_key, http })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn attempt(&self, body: &Value) -> Result<ChatReply, Attempt> {
        let mut req = self.http.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Err(Attempt::Retry(e.to_string(), e.is_timeout())),
        };
        let status = resp.status().as_u16();
        if status == 401 || status == 403 {
            return Err(Attempt::Fatal(LlmError::Auth(status)));
        }
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}"), false));
        }
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string(), e.is_timeout()))?;
        if !(200..300).contains(&status) {
            return Err(Attempt::Fatal(LlmError::Http { status, body: text }));
        }
        parse_completion(&text).map_err(Attempt::Fatal)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.backoff_base_ms as f64 * 2f64.powi(attempt as i32);
        let jitter = rand::rng().random_range(0.5..1.5);
        Duration::from_millis((base * jitter) as u64)
    }
}

impl ChatClient for HttpChatClient {
    fn chat(&self, messages: &[ChatMessage], kind: CallKind) -> Result<ChatReply, LlmError> {
        let body = self.config.request_body(messages, kind);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        let mut all_timeouts = true;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(reply) => return Ok(reply),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg, timeout)) => {
                    log::warn!("chat attempt {} of {attempts} failed: {msg}", attempt + 1);
                    all_timeouts &= timeout;
                    last = msg;
                }
            }
        }
        if all_timeouts {
            Err(LlmError::Timeout { attempts })
        } else {
            Err(LlmError::Unavailable { attempts, last })
        }
    }
}

fn parse_completion(text: &str) -> Result<ChatReply, LlmError> {
    let v: Value = serde_json::from_str(text).map_err(|e| LlmError::BadResponse(e.to_string()))?;
    let content = v["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))?;
    Ok(ChatReply {
        content: content.to_string(),
        prompt_tokens: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
    })
}

/// Offline stand-in that answers tuning and reflection prompts with a fixed
/// policy. Replies depend only on the seed, the call index, and the messages.
#[derive(Debug)]
pub struct MockChatClient {
    seed: u64,
    calls: AtomicU64,
}

impl MockChatClient {
    pub fn new(seed: u64) -> Self {
        Self { seed, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ChatClient for MockChatClient {
    fn chat(&self, messages: &[ChatMessage], _kind: CallKind) -> Result<ChatReply, LlmError> {
        let n = self.calls.fetch_add(1, Ordering::Relaxed);
        let mut h = fnv1a(FNV_OFFSET, &n.to_le_bytes());
        for m in messages {
            h = fnv1a(h, m.content.as_bytes());
        }
        let content = mock_respond(messages, self.seed ^ h)?;
        let prompt_tokens = messages.iter().map(|m| m.content.split_whitespace().count() as u64).sum();
        let completion_tokens = content.split_whitespace().count() as u64;
        Ok(ChatReply { content, prompt_tokens, completion_tokens })
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub const MOCK_WARMUP_JITTER: f64 = 0.1;
pub const MOCK_EXPLOIT_STEP: f64 = 0.15;
pub const MOCK_EXPLORE_STEP: f64 = 0.45;

#[derive(Debug, Clone)]
enum MockParam {
    Num { name: String, low: f64, high: f64, log: bool, int: bool },
    Cat { name: String, choices: Vec<String> },
}

impl MockParam {
    fn name(&self) -> &str {
        match self {
            MockParam::Num { name, .. } | MockParam::Cat { name, .. } => name,
        }
    }
}

fn to_unit(x: f64, low: f64, high: f64, log: bool) -> f64 {
    if log {
        (x.ln() - low.ln()) / (high.ln() - low.ln())
    } else {
        (x - low) / (high - low)
    }
}

fn from_unit(u: f64, low: f64, high: f64, log: bool) -> f64 {
    if log {
        (low.ln() + u * (high.ln() - low.ln())).exp()
    } else {
        low + u * (high - low)
    }
}

fn parse_space_lines(prompt: &str) -> Result<Vec<MockParam>, LlmError> {
    let start = prompt
        .find(markers::SPACE_HEADER)
        .ok_or_else(|| LlmError::MalformedPrompt("search space".into()))?;
    let mut params = Vec::new();
    for line in prompt[start..].lines().skip(1) {
        let Some(rest) = line.strip_prefix("- ") else { break };
        let (name, spec) = rest
            .split_once(": ")
            .ok_or_else(|| LlmError::MalformedPrompt(format!("space line `{line}`")))?;
        let bad = || LlmError::MalformedPrompt(format!("space line `{line}`"));
        if let Some(choices) = spec.strip_prefix("Categorical, choices=") {
            let choices: Vec<String> = serde_json::from_str(choices).map_err(|_| bad())?;
            params.push(MockParam::Cat { name: name.into(), choices });
            continue;
        }
        let (kind, range) = spec.split_once(", Range=[").ok_or_else(bad)?;
        let (bounds, tail) = range.split_once(']').ok_or_else(bad)?;
        let (lo, hi) = bounds.split_once(", ").ok_or_else(bad)?;
        params.push(MockParam::Num {
            name: name.into(),
            low: lo.trim().parse().map_err(|_| bad())?,
            high: hi.trim().parse().map_err(|_| bad())?,
            log: tail.contains("Log-Scale"),
            int: kind == "Integer",
        });
    }
    if params.is_empty() {
        return Err(LlmError::MalformedPrompt("empty search space".into()));
    }
    Ok(params)
}

fn parse_directive(prompt: &str) -> Result<Directive, LlmError> {
    let start = prompt
        .find(markers::GOAL_PREFIX)
        .ok_or_else(|| LlmError::MalformedPrompt("directive".into()))?;
    let rest = &prompt[start + markers::GOAL_PREFIX.len()..];
    [Directive::Warmup, Directive::Exploration, Directive::Exploitation]
        .into_iter()
        .find(|d| rest.starts_with(d.mode()))
        .ok_or_else(|| LlmError::MalformedPrompt("unknown directive".into()))
}

fn parse_base(prompt: &str) -> Result<serde_json::Map<String, Value>, LlmError> {
    let start = prompt
        .find(markers::BASE_HEADER)
        .ok_or_else(|| LlmError::MalformedPrompt("basic configuration".into()))?;
    let line = prompt[start..]
        .lines()
        .find(|l| l.trim_start().starts_with('{'))
        .ok_or_else(|| LlmError::MalformedPrompt("basic configuration".into()))?;
    serde_json::from_str(line.trim()).map_err(|e| LlmError::MalformedPrompt(e.to_string()))
}

fn json_number(x: f64, int: bool) -> Value {
    if int {
        json!(x.round() as i64)
    } else {
        json!(x)
    }
}

/// The mock's reply policy.
///
/// Tuning prompts: warmup returns the space midpoint with uniform ±0.1
/// normalized jitter per numeric dimension and the first choice of every
/// categorical; exploitation and exploration copy the basic configuration
/// and move one seeded numeric dimension by ±0.15 or ±0.45 normalized
/// (clipped). Without numeric dimensions one categorical is switched instead.
/// Reflection prompts get a fixed two-section answer.
pub fn mock_respond(messages: &[ChatMessage], seed: u64) -> Result<String, LlmError> {
    let prompt = messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .ok_or_else(|| LlmError::MalformedPrompt("no user message".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    if prompt.contains(markers::TRIAL_HEADER) {
        let change = prompt
            .lines()
            .find_map(|l| l.strip_prefix("Resulting Performance: "))
            .unwrap_or("unknown");
        return Ok(format!(
            "Reflection:\nThe resulting performance was {change}. The changed parameters explain the shift.\n\n\
             Reflection Summary:\nObserved {change}; keep the changed parameters near their new values if it improved, \
             otherwise move back toward the basic configuration."
        ));
    }

    let params = parse_space_lines(prompt)?;
    let directive = parse_directive(prompt)?;
    let mut out = serde_json::Map::new();
    let note;
    match directive {
        Directive::Warmup => {
            for p in &params {
                let v = match p {
                    MockParam::Num { low, high, log, int, .. } => {
                        let u = (0.5 + rng.random_range(-MOCK_WARMUP_JITTER..=MOCK_WARMUP_JITTER)).clamp(0.0, 1.0);
                        json_number(from_unit(u, *low, *high, *log), *int)
                    }
                    MockParam::Cat { choices, .. } => json!(choices[0]),
                };
                out.insert(p.name().to_string(), v);
            }
            note = "starting near the center of the search space".to_string();
        }
        Directive::Exploration | Directive::Exploitation => {
            let base = parse_base(prompt)?;
            for p in &params {
                let v = base
                    .get(p.name())
                    .cloned()
                    .ok_or_else(|| LlmError::MalformedPrompt(format!("base lacks `{}`", p.name())))?;
                out.insert(p.name().to_string(), v);
            }
            let step = if directive == Directive::Exploration { MOCK_EXPLORE_STEP } else { MOCK_EXPLOIT_STEP };
            let numeric: Vec<&MockParam> = params.iter().filter(|p| matches!(p, MockParam::Num { .. })).collect();
            if numeric.is_empty() {
                let cats: Vec<&MockParam> = params.iter().collect();
                let MockParam::Cat { name, choices } = cats[rng.random_range(0..cats.len())] else { unreachable!() };
                let current = out[name].as_str().unwrap_or_default().to_string();
                let pos = choices.iter().position(|c| *c == current).unwrap_or(0);
                let next = &choices[(pos + 1 + rng.random_range(0..choices.len() - 1)) % choices.len()];
                out.insert(name.clone(), json!(next));
                note = format!("switching {name} from {current} to {next}");
            } else {
                let MockParam::Num { name, low, high, log, int } = numeric[rng.random_range(0..numeric.len())] else {
                    unreachable!()
                };
                let x = out[name]
                    .as_f64()
                    .ok_or_else(|| LlmError::MalformedPrompt(format!("base value of `{name}` is not numeric")))?;
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let u = (to_unit(x, *low, *high, *log) + sign * step).clamp(0.0, 1.0);
                out.insert(name.clone(), json_number(from_unit(u, *low, *high, *log), *int));
                note = format!("moving {name} by {:+} in normalized units", sign * step);
            }
        }
    }
    Ok(format!(
        "Thought: Directive {}; {note}.\nAction: {}",
        directive.mode(),
        Value::Object(out)
    ))
}
