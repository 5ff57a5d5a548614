//! Hierarchical CASH search space: algorithms, their typed hyperparameters,
//! configurations, and the `[0,1]` encoding used by the surrogates.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Std-dev of the Gaussian step applied in normalized coordinates by
/// [`SearchSpace::perturb_local`].
pub const LOCAL_SIGMA: f64 = 0.2;
/// Probability that a categorical dimension is resampled by local perturbation.
pub const CAT_RESAMPLE_PROB: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Classification => f.write_str("classification"),
            TaskKind::Regression => f.write_str("regression"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamKind {
    Float { low: f64, high: f64, log: bool },
    Int { low: i64, high: i64, log: bool },
    Cat { choices: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn float(name: &str, low: f64, high: f64, log: bool) -> Self {
        Self { name: name.to_string(), kind: ParamKind::Float { low, high, log } }
    }

    pub fn int(name: &str, low: i64, high: i64, log: bool) -> Self {
        Self { name: name.to_string(), kind: ParamKind::Int { low, high, log } }
    }

    pub fn cat(name: &str, choices: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            kind: ParamKind::Cat { choices: choices.iter().map(|c| c.to_string()).collect() },
        }
    }

    pub fn is_numeric(&self) -> bool {
        !matches!(self.kind, ParamKind::Cat { .. })
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        let name = &self.name;
        match &self.kind {
            ParamKind::Float { low, high, log } => {
                if !low.is_finite() || !high.is_finite() {
                    return Err(SpaceError::Invariant(format!("{name}: bounds must be finite")));
                }
                check_range(name, *low, *high, *log)
            }
            ParamKind::Int { low, high, log } => check_range(name, *low as f64, *high as f64, *log),
            ParamKind::Cat { choices } => {
                let distinct: HashSet<&String> = choices.iter().collect();
                if distinct.len() < 2 || distinct.len() != choices.len() {
                    return Err(SpaceError::Invariant(format!(
                        "{name}: categorical needs at least 2 distinct choices"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Maps a numeric value to `[0,1]` (log-domain when `log`). Not clamped.
    pub fn normalize(&self, value: f64) -> f64 {
        match self.kind {
            ParamKind::Float { low, high, log } => unit(value, low, high, log),
            ParamKind::Int { low, high, log } => unit(value, low as f64, high as f64, log),
            ParamKind::Cat { .. } => f64::NAN,
        }
    }

    /// Inverse of [`normalize`](Self::normalize); clamps `u` to `[0,1]` and
    /// rounds integers.
    pub fn denormalize(&self, u: f64) -> ParamValue {
        let u = u.clamp(0.0, 1.0);
        match self.kind {
            ParamKind::Float { low, high, log } => {
                ParamValue::Float(from_unit(u, low, high, log).clamp(low, high))
            }
            ParamKind::Int { low, high, log } => {
                let v = from_unit(u, low as f64, high as f64, log).round() as i64;
                ParamValue::Int(v.clamp(low, high))
            }
            ParamKind::Cat { .. } => panic!("denormalize called on categorical `{}`", self.name),
        }
    }

    pub fn choices(&self) -> Option<&[String]> {
        match &self.kind {
            ParamKind::Cat { choices } => Some(choices),
            _ => None,
        }
    }

    /// Checks that `value` has the right type and lies within bounds.
    pub fn check_value(&self, value: &ParamValue) -> Result<(), SpaceError> {
        let bad = |why: &str| Err(SpaceError::InvalidConfig(format!("{}: {why}", self.name)));
        match (&self.kind, value) {
            (ParamKind::Float { low, high, .. }, ParamValue::Float(v)) => {
                if v.is_finite() && *v >= *low && *v <= *high {
                    Ok(())
                } else {
                    bad("out of bounds")
                }
            }
            (ParamKind::Int { low, high, .. }, ParamValue::Int(v)) => {
                if v >= low && v <= high {
                    Ok(())
                } else {
                    bad("out of bounds")
                }
            }
            (ParamKind::Cat { choices }, ParamValue::Cat(c)) => {
                if choices.contains(c) {
                    Ok(())
                } else {
                    bad("unknown choice")
                }
            }
            _ => bad("wrong value type"),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamValue {
        match &self.kind {
            ParamKind::Float { low, high, log } => {
                let v = if *log {
                    rng.random_range(low.ln()..=high.ln()).exp()
                } else {
                    rng.random_range(*low..=*high)
                };
                ParamValue::Float(v.clamp(*low, *high))
            }
            ParamKind::Int { low, high, log } => {
                let v = if *log {
                    // log-uniform over the cells [k, k+1)
                    let x = rng.random_range((*low as f64).ln()..((*high + 1) as f64).ln()).exp();
                    (x.floor() as i64).clamp(*low, *high)
                } else {
                    rng.random_range(*low..=*high)
                };
                ParamValue::Int(v)
            }
            ParamKind::Cat { choices } => {
                ParamValue::Cat(choices[rng.random_range(0..choices.len())].clone())
            }
        }
    }
}

fn check_range(name: &str, low: f64, high: f64, log: bool) -> Result<(), SpaceError> {
    if low >= high {
        return Err(SpaceError::Invariant(format!("{name}: lower ({low}) must be < upper ({high})")));
    }
    if log && low <= 0.0 {
        return Err(SpaceError::Invariant(format!("{name}: log scale requires lower > 0")));
    }
    Ok(())
}

fn unit(v: f64, low: f64, high: f64, log: bool) -> f64 {
    if log {
        (v.ln() - low.ln()) / (high.ln() - low.ln())
    } else {
        (v - low) / (high - low)
    }
}

fn from_unit(u: f64, low: f64, high: f64, log: bool) -> f64 {
    if log {
        (low.ln() + u * (high.ln() - low.ln())).exp()
    } else {
        low + u * (high - low)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Cat(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Float(v) => Some(*v),
            ParamValue::Cat(_) => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v}"),
            ParamValue::Cat(c) => f.write_str(c),
        }
    }
}

/// One algorithm plus a complete assignment of its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub algorithm: String,
    pub values: BTreeMap<String, ParamValue>,
}

impl Configuration {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.values.get(name)
    }
}

/// Numeric dims in `[0,1]` followed by categorical choice indices, each in
/// declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedConfig {
    pub cont: Vec<f64>,
    pub cat: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmSpace {
    pub id: String,
    pub params: Vec<ParamSpec>,
}

impl AlgorithmSpace {
    pub fn numeric_params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| p.is_numeric())
    }

    pub fn categorical_params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| !p.is_numeric())
    }

    pub fn n_cont(&self) -> usize {
        self.numeric_params().count()
    }

    pub fn n_cat(&self) -> usize {
        self.params.len() - self.n_cont()
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub algorithms: Vec<AlgorithmSpace>,
    pub task: TaskKind,
    pub metric: String,
}

// Raw JSON shape of the search-space document.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpace {
    task: TaskKind,
    metric: String,
    algorithms: Vec<RawAlgorithm>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlgorithm {
    name: String,
    params: Vec<RawParam>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawParam {
    name: String,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    high: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    log: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    choices: Option<Vec<String>>,
}

impl RawParam {
    fn into_spec(self) -> Result<ParamSpec, SpaceError> {
        let name = self.name;
        let bounds = |low: Option<f64>, high: Option<f64>| match (low, high) {
            (Some(l), Some(h)) => Ok((l, h)),
            _ => Err(SpaceError::Schema(format!("{name}: numeric param needs `low` and `high`"))),
        };
        let kind = match self.kind.as_str() {
            "float" => {
                let (low, high) = bounds(self.low, self.high)?;
                ParamKind::Float { low, high, log: self.log }
            }
            "int" => {
                let (low, high) = bounds(self.low, self.high)?;
                if low.fract() != 0.0 || high.fract() != 0.0 {
                    return Err(SpaceError::Schema(format!("{name}: int bounds must be integral")));
                }
                ParamKind::Int { low: low as i64, high: high as i64, log: self.log }
            }
            "cat" => {
                let choices = self
                    .choices
                    .ok_or_else(|| SpaceError::Schema(format!("{name}: cat param needs `choices`")))?;
                ParamKind::Cat { choices }
            }
            other => return Err(SpaceError::Schema(format!("{name}: unknown type `{other}`"))),
        };
        let spec = ParamSpec { name, kind };
        spec.validate()?;
        Ok(spec)
    }

    fn from_spec(spec: &ParamSpec) -> Self {
        let (kind, low, high, log, choices) = match &spec.kind {
            ParamKind::Float { low, high, log } => ("float", Some(*low), Some(*high), *log, None),
            ParamKind::Int { low, high, log } => {
                ("int", Some(*low as f64), Some(*high as f64), *log, None)
            }
            ParamKind::Cat { choices } => ("cat", None, None, false, Some(choices.clone())),
        };
        RawParam { name: spec.name.clone(), kind: kind.to_string(), low, high, log, choices }
    }
}

/// Parses and validates a search-space JSON document.
pub fn parse_space(text: &str) -> Result<SearchSpace, SpaceError> {
    let raw: RawSpace = serde_json::from_str(text).map_err(|e| SpaceError::Schema(e.to_string()))?;
    let mut algorithms = Vec::with_capacity(raw.algorithms.len());
    for alg in raw.algorithms {
        let params = alg.params.into_iter().map(RawParam::into_spec).collect::<Result<Vec<_>, _>>()?;
        algorithms.push(AlgorithmSpace { id: alg.name, params });
    }
    SearchSpace::new(algorithms, raw.task, raw.metric)
}

impl SearchSpace {
    pub fn new(
        algorithms: Vec<AlgorithmSpace>,
        task: TaskKind,
        metric: impl Into<String>,
    ) -> Result<Self, SpaceError> {
        if algorithms.is_empty() {
            return Err(SpaceError::Invariant("space needs at least one algorithm".into()));
        }
        let mut ids = HashSet::new();
        for alg in &algorithms {
            if !ids.insert(alg.id.as_str()) {
                return Err(SpaceError::Invariant(format!("duplicate algorithm `{}`", alg.id)));
            }
            let mut names = HashSet::new();
            for p in &alg.params {
                p.validate()?;
                if !names.insert(p.name.as_str()) {
                    return Err(SpaceError::Invariant(format!(
                        "duplicate parameter `{}` in `{}`",
                        p.name, alg.id
                    )));
                }
            }
        }
        Ok(Self { algorithms, task, metric: metric.into() })
    }

    /// Serializes back to the JSON document format accepted by [`parse_space`].
    pub fn to_json(&self) -> String {
        let raw = RawSpace {
            task: self.task,
            metric: self.metric.clone(),
            algorithms: self
                .algorithms
                .iter()
                .map(|a| RawAlgorithm {
                    name: a.id.clone(),
                    params: a.params.iter().map(RawParam::from_spec).collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("space serializes")
    }

    /// Hex SHA-256 of the canonical JSON form; used in the worker handshake.
    pub fn digest(&self) -> String {
        let raw = self.to_json();
        hex::encode(Sha256::digest(raw.as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.algorithms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.algorithms.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.algorithms.iter().map(|a| a.params.len()).sum()
    }

    pub fn algorithm_ids(&self) -> impl Iterator<Item = &str> {
        self.algorithms.iter().map(|a| a.id.as_str())
    }

    pub fn index_of(&self, algorithm_id: &str) -> Result<usize, SpaceError> {
        self.algorithms
            .iter()
            .position(|a| a.id == algorithm_id)
            .ok_or_else(|| SpaceError::UnknownAlgorithm(algorithm_id.to_string()))
    }

    pub fn algorithm(&self, algorithm_id: &str) -> Result<&AlgorithmSpace, SpaceError> {
        Ok(&self.algorithms[self.index_of(algorithm_id)?])
    }

    pub fn validate(&self, config: &Configuration) -> Result<(), SpaceError> {
        let alg = self.algorithm(&config.algorithm)?;
        if config.values.len() != alg.params.len() {
            return Err(SpaceError::InvalidConfig(format!(
                "expected {} values for `{}`, got {}",
                alg.params.len(),
                alg.id,
                config.values.len()
            )));
        }
        for p in &alg.params {
            let v = config
                .values
                .get(&p.name)
                .ok_or_else(|| SpaceError::InvalidConfig(format!("missing `{}`", p.name)))?;
            p.check_value(v)?;
        }
        Ok(())
    }

    pub fn sample_random<R: Rng + ?Sized>(
        &self,
        algorithm_id: &str,
        rng: &mut R,
    ) -> Result<Configuration, SpaceError> {
        let alg = self.algorithm(algorithm_id)?;
        let values = alg.params.iter().map(|p| (p.name.clone(), p.sample(rng))).collect();
        Ok(Configuration { algorithm: alg.id.clone(), values })
    }

    /// Gaussian step of [`LOCAL_SIGMA`] on every numeric dim in normalized
    /// coordinates (clipped to the box), categorical resampling with
    /// probability [`CAT_RESAMPLE_PROB`].
    pub fn perturb_local<R: Rng + ?Sized>(
        &self,
        base: &Configuration,
        rng: &mut R,
    ) -> Result<Configuration, SpaceError> {
        let alg = self.algorithm(&base.algorithm)?;
        let noise = Normal::new(0.0, LOCAL_SIGMA).expect("valid sigma");
        let mut values = BTreeMap::new();
        for p in &alg.params {
            let current = base
                .values
                .get(&p.name)
                .ok_or_else(|| SpaceError::InvalidConfig(format!("missing `{}`", p.name)))?;
            let next = match &p.kind {
                ParamKind::Cat { choices } => {
                    if rng.random::<f64>() < CAT_RESAMPLE_PROB {
                        ParamValue::Cat(choices[rng.random_range(0..choices.len())].clone())
                    } else {
                        current.clone()
                    }
                }
                _ => {
                    let x = current.as_f64().ok_or_else(|| {
                        SpaceError::InvalidConfig(format!("{}: expected a number", p.name))
                    })?;
                    let u = p.normalize(x) + noise.sample(rng);
                    p.denormalize(u.clamp(0.0, 1.0))
                }
            };
            values.insert(p.name.clone(), next);
        }
        Ok(Configuration { algorithm: base.algorithm.clone(), values })
    }

    pub fn encode(&self, config: &Configuration) -> Result<EncodedConfig, SpaceError> {
        let alg = self.algorithm(&config.algorithm)?;
        let mut cont = Vec::with_capacity(alg.params.len());
        let mut cat = Vec::new();
        for p in &alg.params {
            let v = config
                .values
                .get(&p.name)
                .ok_or_else(|| SpaceError::InvalidConfig(format!("missing `{}`", p.name)))?;
            match (&p.kind, v) {
                (ParamKind::Cat { choices }, ParamValue::Cat(c)) => {
                    let idx = choices.iter().position(|x| x == c).ok_or_else(|| {
                        SpaceError::InvalidConfig(format!("{}: unknown choice `{c}`", p.name))
                    })?;
                    cat.push(idx);
                }
                (ParamKind::Cat { .. }, _) => {
                    return Err(SpaceError::InvalidConfig(format!("{}: expected a choice", p.name)))
                }
                (_, value) => {
                    let x = value.as_f64().ok_or_else(|| {
                        SpaceError::InvalidConfig(format!("{}: expected a number", p.name))
                    })?;
                    cont.push(p.normalize(x).clamp(0.0, 1.0));
                }
            }
        }
        Ok(EncodedConfig { cont, cat })
    }

    pub fn decode(
        &self,
        encoded: &EncodedConfig,
        algorithm_id: &str,
    ) -> Result<Configuration, SpaceError> {
        let alg = self.algorithm(algorithm_id)?;
        let (n_cont, n_cat) = (alg.n_cont(), alg.n_cat());
        if encoded.cont.len() != n_cont || encoded.cat.len() != n_cat {
            return Err(SpaceError::DimensionMismatch {
                expected: n_cont + n_cat,
                got: encoded.cont.len() + encoded.cat.len(),
            });
        }
        let (mut ci, mut ki) = (0, 0);
        let mut values = BTreeMap::new();
        for p in &alg.params {
            let v = match &p.kind {
                ParamKind::Cat { choices } => {
                    let idx = encoded.cat[ki];
                    ki += 1;
                    let c = choices.get(idx).ok_or_else(|| {
                        SpaceError::InvalidConfig(format!("{}: choice index {idx} out of range", p.name))
                    })?;
                    ParamValue::Cat(c.clone())
                }
                _ => {
                    let u = encoded.cont[ci];
                    ci += 1;
                    p.denormalize(u)
                }
            };
            values.insert(p.name.clone(), v);
        }
        Ok(Configuration { algorithm: alg.id.clone(), values })
    }

    /// Configuration at the center of the normalized box; categoricals take
    /// their first choice.
    pub fn midpoint(&self, algorithm_id: &str) -> Result<Configuration, SpaceError> {
        let alg = self.algorithm(algorithm_id)?;
        let enc = EncodedConfig { cont: vec![0.5; alg.n_cont()], cat: vec![0; alg.n_cat()] };
        self.decode(&enc, algorithm_id)
    }
}
