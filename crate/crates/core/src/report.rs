//! Text reports recomputed from history files alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::engine::TrialRecord;
use crate::ensemble::{ensemble_select, score, EnsembleMetric, DEFAULT_MAX_ROUNDS};
use crate::metrics::algorithm_diversity;
use crate::space::{Configuration, SearchSpace, TaskKind};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("no history to report on")]
    Empty,
}

pub fn load_history(path: &Path) -> Result<Vec<TrialRecord>, ReportError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ReportError::Read { path: path.display().to_string(), reason: e.to_string() })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ReportError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Best y among records with `iteration <= t`.
pub fn best_at(history: &[TrialRecord], t: usize) -> Option<f64> {
    history.iter().filter(|r| r.iteration <= t).map(|r| r.y).reduce(f64::max)
}

/// Fraction of records per algorithm.
pub fn allocation(history: &[TrialRecord]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for r in history {
        *out.entry(r.algorithm.clone()).or_insert(0.0) += 1.0 / history.len() as f64;
    }
    out
}

/// (iteration, new value) at every p_BO update, per algorithm.
pub fn p_bo_trajectories(history: &[TrialRecord]) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for r in history.iter().filter(|r| r.p_bo_updated) {
        out.entry(r.algorithm.clone()).or_default().push((r.iteration, r.p_bo));
    }
    out
}

fn as_matrix(v: &Value) -> Option<Vec<Vec<f64>>> {
    v.as_array()?
        .iter()
        .map(|row| match row {
            Value::Array(xs) => xs.iter().map(Value::as_f64).collect(),
            Value::Number(n) => n.as_f64().map(|x| vec![x]),
            _ => None,
        })
        .collect()
}

/// Ensemble selection over records whose `aux` carries `val_pred` and
/// `val_target`. Returns (node ids, weights, best single score, ensemble score).
pub fn ensemble_from_aux(
    history: &[TrialRecord],
    task: TaskKind,
) -> Option<(Vec<usize>, Vec<f64>, f64, f64)> {
    let mut nodes = Vec::new();
    let mut preds = Vec::new();
    let mut targets: Option<Vec<f64>> = None;
    for r in history {
        let Some(aux) = &r.aux else { continue };
        let (Some(p), Some(t)) = (aux.get("val_pred").and_then(as_matrix), aux.get("val_target")) else {
            continue;
        };
        let t: Vec<f64> = t.as_array()?.iter().filter_map(Value::as_f64).collect();
        if targets.get_or_insert_with(|| t.clone()) != &t || p.len() != t.len() {
            continue;
        }
        nodes.push(r.node);
        preds.push(p);
    }
    let targets = targets?;
    let metric = match task {
        TaskKind::Classification => EnsembleMetric::BalancedAccuracy,
        TaskKind::Regression => EnsembleMetric::NegMse,
    };
    let res = ensemble_select(&preds, &targets, metric, DEFAULT_MAX_ROUNDS).ok()?;
    let single = preds.iter().map(|p| score(p, &targets, metric)).fold(f64::NEG_INFINITY, f64::max);
    Some((nodes, res.weights, single, res.score))
}

/// Renders the full report for one or more runs. `every` thins the
/// best-so-far table; the final iteration is always shown.
pub fn render(runs: &[Vec<TrialRecord>], space: Option<&SearchSpace>, every: usize) -> Result<String, ReportError> {
    let horizon = runs.iter().flat_map(|h| h.iter().map(|r| r.iteration)).max().ok_or(ReportError::Empty)?;
    let mut out = String::new();

    let _ = writeln!(out, "== best so far ==");
    let mut header = String::from("iteration");
    for i in 0..runs.len() {
        let _ = write!(header, "\trun{i}");
    }
    if runs.len() > 1 {
        header.push_str("\tmean");
    }
    let _ = writeln!(out, "{header}");
    let every = every.max(1);
    for t in (1..=horizon).filter(|t| t % every == 0 || *t == 1 || *t == horizon) {
        let vals: Vec<Option<f64>> = runs.iter().map(|h| best_at(h, t)).collect();
        let mut line = t.to_string();
        for v in &vals {
            match v {
                Some(v) => {
                    let _ = write!(line, "\t{v:.6}");
                }
                None => line.push_str("\t-"),
            }
        }
        if runs.len() > 1 {
            let present: Vec<f64> = vals.iter().flatten().copied().collect();
            if present.is_empty() {
                line.push_str("\t-");
            } else {
                let _ = write!(line, "\t{:.6}", present.iter().sum::<f64>() / present.len() as f64);
            }
        }
        let _ = writeln!(out, "{line}");
    }

    let _ = writeln!(out, "\n== allocation ==");
    let allocs: Vec<BTreeMap<String, f64>> = runs.iter().map(|h| allocation(h)).collect();
    let mut algs: Vec<String> = allocs.iter().flat_map(|a| a.keys().cloned()).collect();
    if let Some(s) = space {
        algs = s.algorithm_ids().map(str::to_string).collect();
    }
    algs.dedup();
    algs.sort();
    algs.dedup();
    for alg in &algs {
        let vals: Vec<f64> = allocs.iter().map(|a| a.get(alg).copied().unwrap_or(0.0)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let cells: Vec<String> = vals.iter().map(|v| format!("{v:.3}")).collect();
        let _ = writeln!(out, "{alg}\t{}\tmean {mean:.3}", cells.join("\t"));
    }

    let _ = writeln!(out, "\n== p_bo trajectories ==");
    for (i, h) in runs.iter().enumerate() {
        for (alg, traj) in p_bo_trajectories(h) {
            let pts: Vec<String> = traj.iter().map(|(t, p)| format!("{t}:{p:.3}")).collect();
            let _ = writeln!(out, "run{i}\t{alg}\t{}", pts.join(" "));
        }
    }

    let _ = writeln!(out, "\n== configuration diversity ==");
    match space {
        Some(space) => {
            for (i, h) in runs.iter().enumerate() {
                for alg in space.algorithm_ids() {
                    let configs: Vec<Configuration> = h
                        .iter()
                        .filter(|r| r.algorithm == alg)
                        .map(|r| Configuration { algorithm: alg.to_string(), values: r.config.clone() })
                        .collect();
                    if configs.is_empty() {
                        continue;
                    }
                    match algorithm_diversity(&configs, space, alg) {
                        Ok(d) => {
                            let _ = writeln!(out, "run{i}\t{alg}\t{d:.4}\t(n={})", configs.len());
                        }
                        Err(e) => {
                            let _ = writeln!(out, "run{i}\t{alg}\terror: {e}");
                        }
                    }
                }
            }
        }
        None => out.push_str("(no search space available)\n"),
    }

    let task = space.map_or(TaskKind::Classification, |s| s.task);
    for (i, h) in runs.iter().enumerate() {
        if let Some((nodes, weights, single, ens)) = ensemble_from_aux(h, task) {
            let _ = writeln!(out, "\n== ensemble (run{i}) ==");
            let _ = writeln!(out, "best single\t{single:.6}\nensemble\t{ens:.6}");
            for (n, w) in nodes.iter().zip(&weights).filter(|(_, w)| **w > 0.0) {
                let _ = writeln!(out, "node {n}\tweight {w:.3}");
            }
        }
    }
    Ok(out)
}
