//! Black-box evaluators: the built-in `synth3` benchmark and a managed
//! subprocess speaking newline-delimited JSON.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::space::{AlgorithmSpace, Configuration, ParamSpec, ParamValue, SearchSpace, TaskKind};

pub const DEFAULT_EVAL_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Larger is better.
    pub y: f64,
    /// Seconds.
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux: Option<Map<String, Value>>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("evaluation timed out after {0:?}")]
    Timeout(Duration),
    #[error("evaluator crashed: {0}")]
    Crash(String),
    /// The evaluator ran but reported that this configuration failed.
    #[error("evaluation failed: {0}")]
    Failed(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl EvalError {
    /// Protocol errors abort a run; everything else only skips the trial.
    pub fn is_fatal(&self) -> bool {
        matches!(self, EvalError::Protocol(_))
    }
}

pub trait Evaluator {
    fn evaluate(&mut self, config: &Configuration) -> Result<EvalResult, EvalError>;
}

/// Adapts a closure returning `y` into an [`Evaluator`].
pub struct FnEvaluator<F>(pub F);

impl<F> Evaluator for FnEvaluator<F>
where
    F: FnMut(&Configuration) -> Result<f64, EvalError>,
{
    fn evaluate(&mut self, config: &Configuration) -> Result<EvalResult, EvalError> {
        let start = Instant::now();
        let y = (self.0)(config)?;
        if !y.is_finite() {
            return Err(EvalError::Failed(format!("non-finite score {y}")));
        }
        Ok(EvalResult { y, wall_time: start.elapsed().as_secs_f64(), aux: None })
    }
}

pub fn synth3_space() -> SearchSpace {
    let unit = |n: &str| ParamSpec::float(n, 0.0, 1.0, false);
    SearchSpace::new(
        vec![
            AlgorithmSpace {
                id: "algoA".into(),
                params: vec![
                    unit("x1"),
                    unit("x2"),
                    unit("x3"),
                    ParamSpec::cat("cat", &["opt", "other1", "other2"]),
                ],
            },
            AlgorithmSpace { id: "algoB".into(), params: vec![unit("x1"), unit("x2")] },
            AlgorithmSpace {
                id: "algoC".into(),
                params: vec![unit("x1"), ParamSpec::cat("cat", &["a", "b"])],
            },
        ],
        TaskKind::Classification,
        "score",
    )
    .expect("synth3 space is valid")
}

/// Three-algorithm synthetic CASH problem with its global optimum 1.0 on
/// algoA at `x = (0.7, 0.3, 0.5)`, `cat = opt`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Synth3;

pub const SYNTH3_OPTIMUM: f64 = 1.0;

impl Synth3 {
    pub fn score(config: &Configuration) -> Result<f64, EvalError> {
        let num = |name: &str| {
            config
                .get(name)
                .and_then(ParamValue::as_f64)
                .ok_or_else(|| EvalError::Failed(format!("missing numeric `{name}`")))
        };
        let cat = |name: &str| match config.get(name) {
            Some(ParamValue::Cat(c)) => Ok(c.as_str()),
            _ => Err(EvalError::Failed(format!("missing categorical `{name}`"))),
        };
        let sq = |v: f64, c: f64| (v - c) * (v - c);
        match config.algorithm.as_str() {
            "algoA" => {
                let d = sq(num("x1")?, 0.7) + sq(num("x2")?, 0.3) + sq(num("x3")?, 0.5);
                let penalty = if cat("cat")? == "opt" { 0.0 } else { 0.1 };
                Ok(1.0 - d / 3.0 - penalty)
            }
            "algoB" => Ok(0.8 - (sq(num("x1")?, 0.2) + sq(num("x2")?, 0.9)) / 2.0),
            "algoC" => {
                let penalty = if cat("cat")? == "a" { 0.0 } else { 0.05 };
                Ok(0.6 - sq(num("x1")?, 0.5) - penalty)
            }
            other => Err(EvalError::Failed(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl Evaluator for Synth3 {
    fn evaluate(&mut self, config: &Configuration) -> Result<EvalResult, EvalError> {
        let start = Instant::now();
        let y = Self::score(config)?;
        Ok(EvalResult { y, wall_time: start.elapsed().as_secs_f64(), aux: None })
    }
}

/// Built-in benchmark by name.
pub fn synth_cash(space_id: &str) -> Option<(SearchSpace, Synth3)> {
    (space_id == "synth3").then(|| (synth3_space(), Synth3))
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Running {
    fn kill(self) {
        drop(self.stdin);
        kill_tree(self.child);
    }
}

/// `sh -c` may fork the real worker instead of exec'ing it, so the whole
/// process group is signalled.
fn kill_tree(mut child: Child) {
    #[cfg(unix)]
    if let Ok(pid) = i32::try_from(child.id()) {
        // SAFETY: kill(2) has no memory-safety preconditions.
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
    let _ = child.wait();
}

/// Worker process started with `sh -c <command>`, restarted after a crash
/// or timeout. Requests are answered one at a time.
pub struct ExternalWorker {
    command: String,
    digest: String,
    timeout: Duration,
    next_id: u64,
    running: Option<Running>,
}

impl ExternalWorker {
    /// Spawns the worker and completes the handshake.
    pub fn spawn(command: &str, space: &SearchSpace, timeout: Duration) -> Result<Self, EvalError> {
        let mut w = Self {
            command: command.to_string(),
            digest: space.digest(),
            timeout,
            next_id: 1,
            running: None,
        };
        w.start()?;
        Ok(w)
    }

    fn start(&mut self) -> Result<(), EvalError> {
        let mut command = Command::new("sh");
        command.arg("-c").arg(&self.command).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::inherit());
        #[cfg(unix)]
        std::os::unix::process::CommandExt::process_group(&mut command, 0);
        let mut child = command
            .spawn()
            .map_err(|e| EvalError::Protocol(format!("cannot start worker: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut running = Running { child, stdin, lines: rx };
        let hello = json!({"hello": {"space_digest": self.digest}});
        let reply = send(&mut running, &hello, self.timeout);
        let ok = match reply {
            Ok(line) => serde_json::from_str::<Value>(&line)
                .ok()
                .and_then(|v| v.get("ready").and_then(Value::as_bool))
                .unwrap_or(false),
            Err(_) => false,
        };
        if !ok {
            running.kill();
            return Err(EvalError::Protocol("worker did not answer the handshake with ready".into()));
        }
        self.running = Some(running);
        Ok(())
    }
}

fn send(running: &mut Running, msg: &Value, timeout: Duration) -> Result<String, EvalError> {
    let mut line = msg.to_string();
    line.push('\n');
    running
        .stdin
        .write_all(line.as_bytes())
        .and_then(|_| running.stdin.flush())
        .map_err(|e| EvalError::Crash(format!("write to worker failed: {e}")))?;
    loop {
        match running.lines.recv_timeout(timeout) {
            Ok(Ok(l)) if l.trim().is_empty() => continue,
            Ok(Ok(l)) => return Ok(l),
            Ok(Err(e)) => return Err(EvalError::Crash(format!("read from worker failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => return Err(EvalError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(EvalError::Crash("worker closed its output".into()))
            }
        }
    }
}

#[derive(Deserialize)]
struct Response {
    id: u64,
    ok: bool,
    #[serde(default)]
    y: Option<f64>,
    #[serde(default)]
    aux: Option<Map<String, Value>>,
    #[serde(default)]
    error: Option<String>,
}

impl Evaluator for ExternalWorker {
    fn evaluate(&mut self, config: &Configuration) -> Result<EvalResult, EvalError> {
        if self.running.is_none() {
            self.start()?;
        }
        let id = self.next_id;
        self.next_id += 1;
        let request = json!({"id": id, "algorithm": config.algorithm, "params": config.values});
        let start = Instant::now();
        let running = self.running.as_mut().expect("worker started");
        let line = match send(running, &request, self.timeout) {
            Ok(l) => l,
            Err(e) => {
                if let Some(r) = self.running.take() {
                    r.kill();
                }
                return Err(e);
            }
        };
        let wall_time = start.elapsed().as_secs_f64();
        let resp: Response = serde_json::from_str(&line)
            .map_err(|e| EvalError::Protocol(format!("bad response `{line}`: {e}")))?;
        if resp.id != id {
            return Err(EvalError::Protocol(format!("expected response id {id}, got {}", resp.id)));
        }
        if !resp.ok {
            return Err(EvalError::Failed(resp.error.unwrap_or_else(|| "unspecified".into())));
        }
        match resp.y {
            Some(y) if y.is_finite() => Ok(EvalResult { y, wall_time, aux: resp.aux }),
            Some(y) => Err(EvalError::Failed(format!("non-finite score {y}"))),
            None => Err(EvalError::Protocol("ok response without y".into())),
        }
    }
}

impl Drop for ExternalWorker {
    fn drop(&mut self) {
        if let Some(r) = self.running.take() {
            r.kill();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn cfg(alg: &str, vals: &[(&str, ParamValue)]) -> Configuration {
        Configuration {
            algorithm: alg.into(),
            values: vals.iter().map(|(k, v)| (k.to_string(), v.clone())).collect::<BTreeMap<_, _>>(),
        }
    }

    #[test]
    fn synth3_optima() {
        let f = ParamValue::Float;
        let a = cfg(
            "algoA",
            &[("x1", f(0.7)), ("x2", f(0.3)), ("x3", f(0.5)), ("cat", ParamValue::Cat("opt".into()))],
        );
        assert_eq!(Synth3.evaluate(&a).unwrap().y, 1.0);
        let b = cfg("algoB", &[("x1", f(0.2)), ("x2", f(0.9))]);
        assert_eq!(Synth3::score(&b).unwrap(), 0.8);
        let c = cfg("algoC", &[("x1", f(0.5)), ("cat", ParamValue::Cat("b".into()))]);
        assert!((Synth3::score(&c).unwrap() - 0.55).abs() < 1e-12);
    }

    #[test]
    fn synth3_bounds_and_purity() {
        let space = synth3_space();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            for alg in ["algoA", "algoB", "algoC"] {
                let c = space.sample_random(alg, &mut rng).unwrap();
                let y = Synth3::score(&c).unwrap();
                assert!(y <= 1.0);
                if alg == "algoC" {
                    assert!(y <= 0.6);
                }
                assert_eq!(y.to_bits(), Synth3::score(&c).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn random_search_leaves_a_gap() {
        let space = synth3_space();
        let mut bests = Vec::new();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut best = f64::NEG_INFINITY;
            for i in 0..300 {
                let alg = &space.algorithms[i % 3].id;
                let c = space.sample_random(alg, &mut rng).unwrap();
                best = best.max(Synth3::score(&c).unwrap());
            }
            bests.push(best);
        }
        bests.sort_by(f64::total_cmp);
        assert!((bests[4] + bests[5]) / 2.0 < 0.99);
    }
}
