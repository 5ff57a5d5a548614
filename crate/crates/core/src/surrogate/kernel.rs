use serde::{Deserialize, Serialize};

use super::SurrogateError;
use crate::space::EncodedConfig;

const SQRT5: f64 = 2.236_067_977_499_79;

/// Hyperparameters of the Matérn-5/2 × Hamming product kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub cont_lengthscales: Vec<f64>,
    pub cat_lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    /// Neutral starting point for a space with `n_cont` numeric dims.
    pub fn default_for(n_cont: usize) -> Self {
        Self {
            cont_lengthscales: vec![0.5; n_cont],
            cat_lengthscale: 1.0,
            signal_variance: 1.0,
            noise_variance: 1e-3,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.cont_lengthscales.iter().all(|l| *l > 0.0 && l.is_finite())
            && self.cat_lengthscale > 0.0
            && self.signal_variance > 0.0
            && self.noise_variance > 0.0
    }

    /// Same shape, unit signal variance; used for similarity scores.
    pub fn unit_signal(&self) -> Self {
        Self { signal_variance: 1.0, ..self.clone() }
    }
}

pub fn matern52(r: f64) -> f64 {
    let s = SQRT5 * r;
    (1.0 + s + 5.0 * r * r / 3.0) * (-s).exp()
}

/// `σ² · k_matern(cont) · exp(−θ · mismatch_fraction(cat))`.
pub fn kernel(a: &EncodedConfig, b: &EncodedConfig, p: &KernelParams) -> Result<f64, SurrogateError> {
    if a.cont.len() != b.cont.len() || a.cat.len() != b.cat.len() {
        return Err(SurrogateError::DimensionMismatch {
            expected: a.cont.len() + a.cat.len(),
            got: b.cont.len() + b.cat.len(),
        });
    }
    if p.cont_lengthscales.len() != a.cont.len() {
        return Err(SurrogateError::DimensionMismatch {
            expected: p.cont_lengthscales.len(),
            got: a.cont.len(),
        });
    }
    Ok(kernel_unchecked(a, b, p))
}

pub(crate) fn kernel_unchecked(a: &EncodedConfig, b: &EncodedConfig, p: &KernelParams) -> f64 {
    let mut r2 = 0.0;
    for ((x, y), l) in a.cont.iter().zip(&b.cont).zip(&p.cont_lengthscales) {
        let d = (x - y) / l;
        r2 += d * d;
    }
    let mut k = p.signal_variance * matern52(r2.sqrt());
    if !a.cat.is_empty() {
        let mismatches = a.cat.iter().zip(&b.cat).filter(|(x, y)| x != y).count();
        let h = mismatches as f64 / a.cat.len() as f64;
        k *= (-p.cat_lengthscale * h).exp();
    }
    k
}
