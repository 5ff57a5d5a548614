use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernel::{kernel_unchecked, KernelParams};
use super::optim::NelderMead;
use super::{AlgoDataset, SurrogateError};
use crate::space::EncodedConfig;

const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-3, 1e3);
const CAT_BOUNDS: (f64, f64) = (1e-3, 1e3);
const SIGNAL_BOUNDS: (f64, f64) = (1e-2, 1e2);
const NOISE_BOUNDS: (f64, f64) = (1e-6, 1e-1);
const MAX_JITTER: f64 = 1e-4;

/// Controls hyperparameter search in [`GpModel::fit_with`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Number of local searches, including the warm start when present.
    pub restarts: usize,
    pub max_evals: usize,
    /// Likelihood is optimized on at most this many rows (random subset);
    /// the posterior always conditions on every row.
    pub hyperopt_subset: usize,
    pub warm_start: Option<KernelParams>,
    pub seed: u64,
    /// `false` keeps `warm_start` as-is and only conditions on the data.
    pub optimize: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_evals: 120,
            hyperopt_subset: 200,
            warm_start: None,
            seed: 0,
            optimize: true,
        }
    }
}

impl FitOptions {
    /// Conditions on the data with fixed kernel hyperparameters.
    pub fn fixed(params: KernelParams) -> Self {
        Self { warm_start: Some(params), optimize: false, ..Self::default() }
    }

    /// Cheaper refit for large datasets: one warm-started search plus one
    /// random restart on a bounded subset.
    pub fn incremental(warm_start: Option<KernelParams>, seed: u64) -> Self {
        Self { restarts: 2, max_evals: 80, hyperopt_subset: 150, warm_start, seed, optimize: true }
    }
}

/// Gaussian-process posterior over one algorithm's encoded subspace. Targets
/// are standardized internally; predictions are returned in original units.
#[derive(Debug, Clone)]
pub struct GpModel {
    algorithm: String,
    params: KernelParams,
    xs: Vec<EncodedConfig>,
    ys: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    /// Row-major lower Cholesky factor of `K + (noise + jitter)·I`.
    chol: Vec<f64>,
    alpha: Vec<f64>,
    jitter: f64,
}

impl GpModel {
    pub fn fit(data: &AlgoDataset) -> Result<Self, SurrogateError> {
        Self::fit_with(data, &FitOptions::default())
    }

    pub fn fit_with(data: &AlgoDataset, opts: &FitOptions) -> Result<Self, SurrogateError> {
        let n = data.rows.len();
        if n < 2 {
            return Err(SurrogateError::InsufficientData { needed: 2, got: n });
        }
        let (n_cont, n_cat) = (data.rows[0].x.cont.len(), data.rows[0].x.cat.len());
        for row in &data.rows {
            if row.x.cont.len() != n_cont || row.x.cat.len() != n_cat {
                return Err(SurrogateError::DimensionMismatch {
                    expected: n_cont + n_cat,
                    got: row.x.cont.len() + row.x.cat.len(),
                });
            }
            if !row.y.is_finite() {
                return Err(SurrogateError::NonFiniteTarget);
            }
        }
        let xs: Vec<EncodedConfig> = data.rows.iter().map(|r| r.x.clone()).collect();
        let ys: Vec<f64> = data.rows.iter().map(|r| r.y).collect();
        let y_mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
        let y_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let z: Vec<f64> = ys.iter().map(|y| (y - y_mean) / y_std).collect();

        let params = match (&opts.warm_start, opts.optimize) {
            (Some(p), false) => {
                if p.cont_lengthscales.len() != n_cont {
                    return Err(SurrogateError::DimensionMismatch {
                        expected: n_cont,
                        got: p.cont_lengthscales.len(),
                    });
                }
                p.clone()
            }
            _ => optimize_params(&xs, &z, n_cont, n_cat, opts),
        };

        let mut gram = gram_matrix(&xs, &params);
        let mut jitter = 0.0;
        let chol = loop {
            let mut a = gram.clone();
            for i in 0..n {
                a[i * n + i] += params.noise_variance + jitter;
            }
            if cholesky_in_place(&mut a, n) {
                break a;
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
            if jitter > MAX_JITTER * 1.000_001 {
                return Err(SurrogateError::NumericalFailure);
            }
        };
        gram.clear();
        let alpha = cho_solve(&chol, n, &z);
        Ok(Self { algorithm: data.algorithm.clone(), params, xs, ys, y_mean, y_std, chol, alpha, jitter })
    }

    /// Posterior after appending one observation, keeping hyperparameters and
    /// jitter. Extends the Cholesky factor by one row in O(n²); fails when the
    /// extended matrix is not numerically positive definite.
    pub fn extended(&self, x: EncodedConfig, y: f64) -> Result<Self, SurrogateError> {
        self.check_dims(&x)?;
        if !y.is_finite() {
            return Err(SurrogateError::NonFiniteTarget);
        }
        let n = self.ys.len();
        let m = n + 1;
        let mut l_new = self.cross(&x);
        forward_solve_in_place(&self.chol, n, &mut l_new);
        let d2 = kernel_unchecked(&x, &x, &self.params) + self.params.noise_variance + self.jitter
            - dot(&l_new, &l_new);
        if !(d2 > 0.0 && d2.is_finite()) {
            return Err(SurrogateError::NumericalFailure);
        }
        let mut chol = vec![0.0; m * m];
        for i in 0..n {
            chol[i * m..i * m + i + 1].copy_from_slice(&self.chol[i * n..i * n + i + 1]);
        }
        chol[n * m..n * m + n].copy_from_slice(&l_new);
        chol[n * m + n] = d2.sqrt();

        let mut xs = self.xs.clone();
        xs.push(x);
        let mut ys = self.ys.clone();
        ys.push(y);
        let y_mean = ys.iter().sum::<f64>() / m as f64;
        let var = ys.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / m as f64;
        let y_std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let z: Vec<f64> = ys.iter().map(|v| (v - y_mean) / y_std).collect();
        let alpha = cho_solve(&chol, m, &z);
        Ok(Self {
            algorithm: self.algorithm.clone(),
            params: self.params.clone(),
            xs,
            ys,
            y_mean,
            y_std,
            chol,
            alpha,
            jitter: self.jitter,
        })
    }

    pub fn algorithm(&self) -> &str {
        &self.algorithm
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn y_std(&self) -> f64 {
        self.y_std
    }

    pub fn inputs(&self) -> &[EncodedConfig] {
        &self.xs
    }

    pub fn targets(&self) -> &[f64] {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    /// Observation noise variance in original target units.
    pub fn noise_variance(&self) -> f64 {
        (self.params.noise_variance + self.jitter) * self.y_std * self.y_std
    }

    /// Prior signal variance in original target units.
    pub fn signal_variance(&self) -> f64 {
        self.params.signal_variance * self.y_std * self.y_std
    }

    fn check_dims(&self, x: &EncodedConfig) -> Result<(), SurrogateError> {
        let (c, k) = (self.params.cont_lengthscales.len(), self.xs[0].cat.len());
        if x.cont.len() != c || x.cat.len() != k {
            return Err(SurrogateError::DimensionMismatch { expected: c + k, got: x.cont.len() + x.cat.len() });
        }
        Ok(())
    }

    fn cross(&self, x: &EncodedConfig) -> Vec<f64> {
        self.xs.iter().map(|xi| kernel_unchecked(xi, x, &self.params)).collect()
    }

    pub fn predict_mean(&self, x: &EncodedConfig) -> Result<f64, SurrogateError> {
        self.check_dims(x)?;
        let k = self.cross(x);
        Ok(self.y_mean + self.y_std * dot(&k, &self.alpha))
    }

    /// Posterior mean and latent-function variance (noise excluded).
    pub fn predict(&self, x: &EncodedConfig) -> Result<(f64, f64), SurrogateError> {
        self.check_dims(x)?;
        let n = self.ys.len();
        let mut v = self.cross(x);
        let mean = self.y_mean + self.y_std * dot(&v, &self.alpha);
        forward_solve_in_place(&self.chol, n, &mut v);
        let var = (self.params.signal_variance - dot(&v, &v)).max(0.0);
        Ok((mean, var * self.y_std * self.y_std))
    }

    /// Same as [`predict`](Self::predict) over many points, solving all
    /// right-hand sides in one pass.
    pub fn predict_batch(&self, xs: &[EncodedConfig]) -> Result<Vec<(f64, f64)>, SurrogateError> {
        for x in xs {
            self.check_dims(x)?;
        }
        let (n, m) = (self.ys.len(), xs.len());
        // b is n×m row-major: column j holds k(X, xs[j])
        let mut b = vec![0.0; n * m];
        for (i, xi) in self.xs.iter().enumerate() {
            let row = &mut b[i * m..(i + 1) * m];
            for (r, x) in row.iter_mut().zip(xs) {
                *r = kernel_unchecked(xi, x, &self.params);
            }
        }
        let mut means = vec![self.y_mean; m];
        for i in 0..n {
            let a = self.alpha[i] * self.y_std;
            for (mean, k) in means.iter_mut().zip(&b[i * m..(i + 1) * m]) {
                *mean += a * k;
            }
        }
        for i in 0..n {
            let (done, rest) = b.split_at_mut(i * m);
            let row = &mut rest[..m];
            for (j, &l) in self.chol[i * n..i * n + i].iter().enumerate() {
                if l != 0.0 {
                    for (r, v) in row.iter_mut().zip(&done[j * m..(j + 1) * m]) {
                        *r -= l * v;
                    }
                }
            }
            let d = self.chol[i * n + i];
            for r in row.iter_mut() {
                *r /= d;
            }
        }
        let mut sq = vec![0.0; m];
        for i in 0..n {
            for (s, v) in sq.iter_mut().zip(&b[i * m..(i + 1) * m]) {
                *s += v * v;
            }
        }
        let scale = self.y_std * self.y_std;
        Ok(means
            .into_iter()
            .zip(sq)
            .map(|(mean, s)| (mean, (self.params.signal_variance - s).max(0.0) * scale))
            .collect())
    }

    /// Log marginal likelihood of the standardized targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.ys.len();
        let z: Vec<f64> = self.ys.iter().map(|y| (y - self.y_mean) / self.y_std).collect();
        let log_det: f64 = (0..n).map(|i| self.chol[i * n + i].ln()).sum();
        -0.5 * dot(&z, &self.alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

fn gram_matrix(xs: &[EncodedConfig], p: &KernelParams) -> Vec<f64> {
    let n = xs.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_unchecked(&xs[i], &xs[j], p);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Overwrites the lower triangle of the row-major `a` with its Cholesky
/// factor and zeroes the upper triangle. Returns false if not positive definite.
pub(crate) fn cholesky_in_place(a: &mut [f64], n: usize) -> bool {
    for i in 0..n {
        for j in 0..=i {
            let (head, tail) = a.split_at_mut(i * n);
            let row_i = &tail[..n];
            let s = if j == i {
                row_i[i] - dot(&row_i[..j], &row_i[..j])
            } else {
                let row_j = &head[j * n..j * n + n];
                (row_i[j] - dot(&row_i[..j], &row_j[..j])) / row_j[j]
            };
            if j == i {
                if !(s > 0.0) || !s.is_finite() {
                    return false;
                }
                tail[i] = s.sqrt();
            } else {
                tail[j] = s;
            }
        }
        for v in &mut a[i * n + i + 1..i * n + n] {
            *v = 0.0;
        }
    }
    true
}

fn forward_solve_in_place(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        b[i] = (b[i] - dot(row, &b[..i])) / l[i * n + i];
    }
}

fn cho_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    forward_solve_in_place(l, n, &mut x);
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn negative_log_likelihood(xs: &[EncodedConfig], z: &[f64], p: &KernelParams) -> f64 {
    let n = xs.len();
    let mut a = gram_matrix(xs, p);
    for i in 0..n {
        a[i * n + i] += p.noise_variance;
    }
    if !cholesky_in_place(&mut a, n) {
        return f64::INFINITY;
    }
    let alpha = cho_solve(&a, n, z);
    let log_det: f64 = (0..n).map(|i| a[i * n + i].ln()).sum();
    0.5 * dot(z, &alpha) + log_det + 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

// Log-space parameter vector: [ln ℓ.., ln θ (if categorical dims), ln σ², ln noise].
fn pack(p: &KernelParams, has_cat: bool) -> Vec<f64> {
    let mut v: Vec<f64> = p.cont_lengthscales.iter().map(|l| l.ln()).collect();
    if has_cat {
        v.push(p.cat_lengthscale.ln());
    }
    v.push(p.signal_variance.ln());
    v.push(p.noise_variance.ln());
    v
}

fn unpack(v: &[f64], n_cont: usize, has_cat: bool) -> KernelParams {
    let clamp = |x: f64, (lo, hi): (f64, f64)| x.exp().clamp(lo, hi);
    let mut i = n_cont;
    let cont_lengthscales = v[..n_cont].iter().map(|&x| clamp(x, LENGTHSCALE_BOUNDS)).collect();
    let cat_lengthscale = if has_cat {
        i += 1;
        clamp(v[n_cont], CAT_BOUNDS)
    } else {
        1.0
    };
    KernelParams {
        cont_lengthscales,
        cat_lengthscale,
        signal_variance: clamp(v[i], SIGNAL_BOUNDS),
        noise_variance: clamp(v[i + 1], NOISE_BOUNDS),
    }
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo.ln()..hi.ln()).exp()
}

fn optimize_params(
    xs: &[EncodedConfig],
    z: &[f64],
    n_cont: usize,
    n_cat: usize,
    opts: &FitOptions,
) -> KernelParams {
    let has_cat = n_cat > 0;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (sub_x, sub_z): (Vec<EncodedConfig>, Vec<f64>) = if xs.len() > opts.hyperopt_subset {
        let mut idx = index::sample(&mut rng, xs.len(), opts.hyperopt_subset).into_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| (xs[i].clone(), z[i])).unzip()
    } else {
        (xs.to_vec(), z.to_vec())
    };

    let mut starts = Vec::with_capacity(opts.restarts.max(1));
    match &opts.warm_start {
        Some(p) if p.cont_lengthscales.len() == n_cont && p.is_valid() => starts.push(p.clone()),
        _ => starts.push(KernelParams::default_for(n_cont)),
    }
    while starts.len() < opts.restarts.max(1) {
        starts.push(KernelParams {
            cont_lengthscales: (0..n_cont).map(|_| log_uniform(&mut rng, LENGTHSCALE_BOUNDS)).collect(),
            cat_lengthscale: log_uniform(&mut rng, CAT_BOUNDS),
            signal_variance: 1.0,
            noise_variance: log_uniform(&mut rng, NOISE_BOUNDS),
        });
    }

    let nm = NelderMead { max_evals: opts.max_evals, initial_step: 1.0, tolerance: 1e-6 };
    let objective = |v: &[f64]| negative_log_likelihood(&sub_x, &sub_z, &unpack(v, n_cont, has_cat));
    let mut best: Option<(KernelParams, f64)> = None;
    for start in starts {
        let (v, f) = nm.minimize(objective, &pack(&start, has_cat));
        if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
            best = Some((unpack(&v, n_cont, has_cat), f));
        }
    }
    best.map(|(p, _)| p).unwrap_or_else(|| KernelParams::default_for(n_cont))
}
