//! Per-algorithm Gaussian-process surrogates, Expected Improvement,
//! cross-validated rank quality, and the softmax algorithm prior.

mod gp;
mod kernel;
pub mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;
use thiserror::Error;

pub use gp::{FitOptions, GpModel};
pub use kernel::{kernel, matern52, KernelParams};

use crate::metrics;
use crate::space::{EncodedConfig, SearchSpace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("need at least {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("covariance factorization failed after jitter escalation")]
    NumericalFailure,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite target value")]
    NonFiniteTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataRow {
    pub x: EncodedConfig,
    pub y: f64,
}

/// Evaluated configurations of one algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgoDataset {
    pub algorithm: String,
    pub rows: Vec<DataRow>,
}

impl AlgoDataset {
    pub fn new(algorithm: impl Into<String>) -> Self {
        Self { algorithm: algorithm.into(), rows: Vec::new() }
    }

    pub fn push(&mut self, x: EncodedConfig, y: f64) {
        self.rows.push(DataRow { x, y });
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn best(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.y).reduce(f64::max)
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement over `best_y` under a normal posterior (maximization,
/// no exploration offset).
pub fn expected_improvement(mean: f64, variance: f64, best_y: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return (mean - best_y).max(0.0);
    }
    let z = (mean - best_y) / sigma;
    (sigma * (z * std_normal_cdf(z) + std_normal_pdf(z))).max(0.0)
}

/// Pooled out-of-fold predictions: `(predicted, true)` aligned.
///
/// Rows are shuffled with `seed` and dealt round-robin into `folds` folds.
/// With `fixed` kernel parameters each fold only re-conditions; otherwise
/// each fold gets a full hyperparameter fit.
pub fn cv_predictions(
    data: &AlgoDataset,
    folds: usize,
    seed: u64,
    fixed: Option<&KernelParams>,
) -> Result<(Vec<f64>, Vec<f64>), SurrogateError> {
    let n = data.rows.len();
    if folds < 2 || n < folds {
        return Err(SurrogateError::InsufficientData { needed: folds.max(2), got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut predicted = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for fold in 0..folds {
        let held: Vec<usize> = order.iter().skip(fold).step_by(folds).copied().collect();
        let train = AlgoDataset {
            algorithm: data.algorithm.clone(),
            rows: order
                .iter()
                .enumerate()
                .filter(|(pos, _)| pos % folds != fold)
                .map(|(_, &i)| data.rows[i].clone())
                .collect(),
        };
        let opts = match fixed {
            Some(p) => FitOptions::fixed(p.clone()),
            None => FitOptions { seed: seed.wrapping_add(fold as u64), ..FitOptions::default() },
        };
        let model = GpModel::fit_with(&train, &opts)?;
        for i in held {
            predicted.push(model.predict_mean(&data.rows[i].x)?);
            truth.push(data.rows[i].y);
        }
    }
    Ok((predicted, truth))
}

/// Kendall τ-a between pooled out-of-fold predictions and true targets.
pub fn cv_kendall_tau(
    data: &AlgoDataset,
    folds: usize,
    seed: u64,
    fixed: Option<&KernelParams>,
) -> Result<f64, SurrogateError> {
    let (pred, truth) = cv_predictions(data, folds, seed, fixed)?;
    metrics::kendall_tau(&pred, &truth)
        .map_err(|_| SurrogateError::InsufficientData { needed: 2, got: pred.len() })
}

/// Softmax over min–max normalized mean predictions of `n_samples` uniform
/// configurations per algorithm. Algorithms without a model get the optimistic
/// value 1; with no model anywhere the prior is uniform.
pub fn algorithm_prior<R: Rng + ?Sized>(
    models: &[Option<&GpModel>],
    space: &SearchSpace,
    n_samples: usize,
    rng: &mut R,
) -> Vec<f64> {
    let k = models.len();
    if models.iter().all(Option::is_none) {
        return vec![1.0 / k as f64; k];
    }
    let mut means = Vec::new();
    for (alg, model) in space.algorithms.iter().zip(models) {
        let Some(model) = model else { continue };
        let mut total = 0.0;
        for _ in 0..n_samples.max(1) {
            let cfg = space.sample_random(&alg.id, rng).expect("algorithm exists");
            let enc = space.encode(&cfg).expect("sampled config encodes");
            total += model.predict_mean(&enc).expect("dimensions match");
        }
        means.push(total / n_samples.max(1) as f64);
    }
    let mut normalized = metrics::minmax_normalize(&means).into_iter();
    let values: Vec<f64> = models
        .iter()
        .map(|m| if m.is_some() { normalized.next().unwrap() } else { 1.0 })
        .collect();
    softmax(&values)
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
