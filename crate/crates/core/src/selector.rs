//! Per-algorithm choice between the BO and the LLM proposer, driven by how
//! well the surrogate ranks held-out data.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::surrogate::{cv_kendall_tau, AlgoDataset, KernelParams};

pub const DEFAULT_EPSILON: f64 = 0.05;
pub const UPDATE_PERIOD: usize = 5;
pub const MIN_UPDATE_DATA: usize = 10;
pub const CV_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proposer {
    Bo,
    Llm,
}

/// `max(ε, (τ + 1) / 2)`.
pub fn update_p_bo(tau: f64, epsilon: f64) -> f64 {
    epsilon.max((tau + 1.0) / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposerState {
    p_bo: Vec<f64>,
    since_update: Vec<usize>,
    pub epsilon: f64,
}

impl ProposerState {
    pub fn new(n_algorithms: usize, epsilon: f64) -> Self {
        assert!(epsilon > 0.0 && epsilon < 1.0, "epsilon must lie in (0, 1)");
        Self { p_bo: vec![0.0; n_algorithms], since_update: vec![0; n_algorithms], epsilon }
    }

    pub fn p_bo(&self, alg: usize) -> f64 {
        self.p_bo[alg]
    }

    pub fn pending(&self, alg: usize) -> usize {
        self.since_update[alg]
    }

    /// Records one new observation for `alg`.
    pub fn observe(&mut self, alg: usize) {
        self.since_update[alg] += 1;
    }

    /// Once `UPDATE_PERIOD` observations have accumulated, resets the counter
    /// and, if the dataset has at least `MIN_UPDATE_DATA` rows, recomputes
    /// p_BO from cross-validated Kendall τ. Returns τ when p_BO changed.
    /// A surrogate failure keeps the previous value.
    pub fn maybe_update(
        &mut self,
        alg: usize,
        data: &AlgoDataset,
        seed: u64,
        params: Option<&KernelParams>,
    ) -> Option<f64> {
        if self.since_update[alg] < UPDATE_PERIOD {
            return None;
        }
        self.since_update[alg] = 0;
        if data.len() < MIN_UPDATE_DATA {
            return None;
        }
        match cv_kendall_tau(data, CV_FOLDS, seed, params) {
            Ok(tau) => {
                self.p_bo[alg] = update_p_bo(tau, self.epsilon);
                Some(tau)
            }
            Err(e) => {
                log::warn!("p_bo update for algorithm {alg} skipped: {e}");
                None
            }
        }
    }

    pub fn choose<R: Rng + ?Sized>(&self, alg: usize, rng: &mut R) -> Proposer {
        choose_with(self.p_bo[alg], rng)
    }
}

/// Bernoulli(p) draw: BO on success.
pub fn choose_with<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Proposer {
    if rng.random::<f64>() < p {
        Proposer::Bo
    } else {
        Proposer::Llm
    }
}
