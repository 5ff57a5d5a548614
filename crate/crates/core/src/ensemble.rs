//! Post-hoc greedy ensemble selection over validation predictions, and the
//! pairwise prediction-diversity score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_ROUNDS: usize = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty model pool")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMetric {
    /// Targets are class indices; predictions are probability vectors.
    Accuracy,
    BalancedAccuracy,
    /// Negated mean squared error over one-dimensional predictions.
    NegMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub weights: Vec<f64>,
    pub score: f64,
    pub rounds: usize,
}

/// Model-by-sample predictions; each prediction is a vector (class
/// probabilities, or a single regression value).
pub type Predictions = [Vec<Vec<f64>>];

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn score(pred: &[Vec<f64>], targets: &[f64], metric: EnsembleMetric) -> f64 {
    match metric {
        EnsembleMetric::Accuracy => {
            let hits = pred.iter().zip(targets).filter(|(p, t)| argmax(p) == **t as usize).count();
            hits as f64 / targets.len() as f64
        }
        EnsembleMetric::BalancedAccuracy => {
            let k = pred[0].len().max(targets.iter().map(|t| *t as usize + 1).max().unwrap_or(0));
            let mut hits = vec![0usize; k];
            let mut totals = vec![0usize; k];
            for (p, t) in pred.iter().zip(targets) {
                let c = *t as usize;
                totals[c] += 1;
                if argmax(p) == c {
                    hits[c] += 1;
                }
            }
            let present: Vec<f64> = hits
                .iter()
                .zip(&totals)
                .filter(|(_, n)| **n > 0)
                .map(|(h, n)| *h as f64 / *n as f64)
                .collect();
            present.iter().sum::<f64>() / present.len() as f64
        }
        EnsembleMetric::NegMse => {
            let se: f64 = pred.iter().zip(targets).map(|(p, t)| (p[0] - t).powi(2)).sum();
            -se / targets.len() as f64
        }
    }
}

fn check_shapes(predictions: &Predictions, targets: &[f64]) -> Result<usize, EnsembleError> {
    let first = predictions.first().ok_or(EnsembleError::Empty)?;
    if targets.is_empty() {
        return Err(EnsembleError::ShapeMismatch("no validation targets".into()));
    }
    let dim = first.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(EnsembleError::ShapeMismatch("empty prediction vectors".into()));
    }
    for (m, p) in predictions.iter().enumerate() {
        if p.len() != targets.len() {
            return Err(EnsembleError::ShapeMismatch(format!(
                "model {m} has {} predictions for {} targets",
                p.len(),
                targets.len()
            )));
        }
        if p.iter().any(|row| row.len() != dim) {
            return Err(EnsembleError::ShapeMismatch(format!("model {m} has ragged rows")));
        }
    }
    Ok(dim)
}

/// Greedy forward selection with replacement. Each round adds the model that
/// maximizes the uniform average's score; stops after `max_rounds` or when no
/// addition strictly improves. Weights are normalized selection counts.
pub fn ensemble_select(
    predictions: &Predictions,
    targets: &[f64],
    metric: EnsembleMetric,
    max_rounds: usize,
) -> Result<EnsembleResult, EnsembleError> {
    let dim = check_shapes(predictions, targets)?;
    let n = targets.len();
    let mut counts = vec![0usize; predictions.len()];
    let mut sum = vec![vec![0.0; dim]; n];
    let mut current = f64::NEG_INFINITY;
    let mut rounds = 0;
    let mut candidate = vec![vec![0.0; dim]; n];
    while rounds < max_rounds {
        let k = (rounds + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for (m, pred) in predictions.iter().enumerate() {
            for ((c, s), p) in candidate.iter_mut().zip(&sum).zip(pred) {
                for ((ci, si), pi) in c.iter_mut().zip(s).zip(p) {
                    *ci = (si + pi) / k;
                }
            }
            let sc = score(&candidate, targets, metric);
            if best.is_none_or(|(_, b)| sc > b) {
                best = Some((m, sc));
            }
        }
        let (m, sc) = best.expect("non-empty pool");
        if sc <= current {
            break;
        }
        for (s, p) in sum.iter_mut().zip(&predictions[m]) {
            for (si, pi) in s.iter_mut().zip(p) {
                *si += pi;
            }
        }
        counts[m] += 1;
        current = sc;
        rounds += 1;
    }
    let total = counts.iter().sum::<usize>() as f64;
    Ok(EnsembleResult {
        weights: counts.iter().map(|c| *c as f64 / total).collect(),
        score: current,
        rounds,
    })
}

/// Score of the weighted average of `predictions`.
pub fn weighted_score(
    predictions: &Predictions,
    weights: &[f64],
    targets: &[f64],
    metric: EnsembleMetric,
) -> Result<f64, EnsembleError> {
    let dim = check_shapes(predictions, targets)?;
    if weights.len() != predictions.len() {
        return Err(EnsembleError::ShapeMismatch("one weight per model".into()));
    }
    let mut avg = vec![vec![0.0; dim]; targets.len()];
    for (pred, w) in predictions.iter().zip(weights) {
        for (a, p) in avg.iter_mut().zip(pred) {
            for (ai, pi) in a.iter_mut().zip(p) {
                *ai += w * pi;
            }
        }
    }
    Ok(score(&avg, targets, metric))
}

/// `(√2/2) · mean_s ‖p_i(s) − p_j(s)‖₂`; lies in [0, 1] for probability rows.
pub fn prediction_diversity(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, EnsembleError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EnsembleError::ShapeMismatch(format!("{} vs {} samples", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (p, q) in a.iter().zip(b) {
        if p.len() != q.len() {
            return Err(EnsembleError::ShapeMismatch("row lengths differ".into()));
        }
        total += p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    }
    Ok(std::f64::consts::FRAC_1_SQRT_2 * total / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn onehot(c: usize, conf: f64) -> Vec<f64> {
        if c == 0 {
            vec![conf, 1.0 - conf]
        } else {
            vec![1.0 - conf, conf]
        }
    }

    /// Model A is confidently right on the first half and, on the second
    /// half, weakly wrong on 4 of 5 samples; model B mirrors it.
    fn complementary() -> (Vec<Vec<Vec<f64>>>, Vec<f64>) {
        let targets: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let model = |good: std::ops::Range<usize>, lucky: usize| -> Vec<Vec<f64>> {
            (0..10)
                .map(|i| {
                    let t = i % 2;
                    if good.contains(&i) {
                        onehot(t, 0.9)
                    } else if i == lucky {
                        onehot(t, 0.55)
                    } else {
                        onehot(1 - t, 0.55)
                    }
                })
                .collect()
        };
        let a = model(0..5, 5);
        let b = model(5..10, 0);
        (vec![a, b], targets)
    }

    #[test]
    fn complementary_pair_beats_singles() {
        let (preds, targets) = complementary();
        let single: Vec<f64> = preds.iter().map(|p| score(p, &targets, EnsembleMetric::Accuracy)).collect();
        assert_eq!(single, vec![0.6, 0.6]);
        let res = ensemble_select(&preds, &targets, EnsembleMetric::Accuracy, 25).unwrap();
        // exhaustive enumeration of selection counts up to 25 rounds
        let mut best = f64::NEG_INFINITY;
        for ca in 0..=25 {
            for cb in 0..=(25 - ca) {
                if ca + cb == 0 {
                    continue;
                }
                let w = [ca as f64 / (ca + cb) as f64, cb as f64 / (ca + cb) as f64];
                best = best.max(weighted_score(&preds, &w, &targets, EnsembleMetric::Accuracy).unwrap());
            }
        }
        assert_eq!(best, 1.0);
        assert_eq!(res.score, best);
        assert!(res.weights.iter().all(|w| *w > 0.0));
    }

    #[test]
    fn perfect_model_and_singleton() {
        let targets = vec![0.0, 1.0, 1.0, 0.0];
        let perfect: Vec<Vec<f64>> = targets.iter().map(|t| onehot(*t as usize, 1.0)).collect();
        let noisy: Vec<Vec<f64>> = targets.iter().map(|_| vec![0.5, 0.5]).collect();
        let res = ensemble_select(&[noisy.clone(), perfect], &targets, EnsembleMetric::BalancedAccuracy, 25)
            .unwrap();
        assert_eq!(res.score, 1.0);
        let one = ensemble_select(&[noisy], &targets, EnsembleMetric::Accuracy, 25).unwrap();
        assert_eq!(one.weights, vec![1.0]);
    }

    #[test]
    fn ensemble_dominates_best_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for metric in [EnsembleMetric::Accuracy, EnsembleMetric::BalancedAccuracy, EnsembleMetric::NegMse] {
            let n = 40;
            let targets: Vec<f64> = match metric {
                EnsembleMetric::NegMse => (0..n).map(|_| rng.random::<f64>()).collect(),
                _ => (0..n).map(|_| rng.random_range(0..3) as f64).collect(),
            };
            let preds: Vec<Vec<Vec<f64>>> = (0..6)
                .map(|_| {
                    (0..n)
                        .map(|_| match metric {
                            EnsembleMetric::NegMse => vec![rng.random::<f64>()],
                            _ => {
                                let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                                let s: f64 = raw.iter().sum();
                                raw.iter().map(|r| r / s).collect()
                            }
                        })
                        .collect()
                })
                .collect();
            let best_single =
                preds.iter().map(|p| score(p, &targets, metric)).fold(f64::NEG_INFINITY, f64::max);
            let res = ensemble_select(&preds, &targets, metric, 25).unwrap();
            assert!(res.score >= best_single);
            assert!((res.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let ws = weighted_score(&preds, &res.weights, &targets, metric).unwrap();
            assert!((ws - res.score).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_errors() {
        let targets = vec![0.0, 1.0];
        assert_eq!(ensemble_select(&[], &targets, EnsembleMetric::Accuracy, 5), Err(EnsembleError::Empty));
        let short = vec![vec![vec![1.0, 0.0]]];
        assert!(matches!(
            ensemble_select(&short, &targets, EnsembleMetric::Accuracy, 5),
            Err(EnsembleError::ShapeMismatch(_))
        ));
        assert!(prediction_diversity(&[vec![1.0]], &[]).is_err());
    }

    #[test]
    fn diversity_values() {
        let a = vec![vec![1.0, 0.0]; 7];
        let b = vec![vec![0.0, 1.0]; 7];
        assert_eq!(prediction_diversity(&a, &a).unwrap(), 0.0);
        assert!((prediction_diversity(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rand_rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..20)
                .map(|_| {
                    let x: f64 = rng.random();
                    vec![x, 1.0 - x]
                })
                .collect()
        };
        let (p, q) = (rand_rows(&mut rng), rand_rows(&mut rng));
        let d = prediction_diversity(&p, &q).unwrap();
        assert_eq!(d, prediction_diversity(&q, &p).unwrap());
        assert!((0.0..=1.0).contains(&d));
    }
}
