//! Rank correlation, normalization, and configuration-diversity statistics.

use std::cmp::Ordering;

use thiserror::Error;

use crate::space::{Configuration, ParamKind, ParamSpec, ParamValue, SearchSpace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} values")]
    TooShort(usize),
    #[error("sample {value} outside [{low}, {high}]")]
    OutOfBounds { value: f64, low: f64, high: f64 },
    #[error("configuration for `{found}` passed where `{expected}` was expected")]
    AlgorithmMismatch { expected: String, found: String },
    #[error("parameter `{0}` missing or of the wrong type")]
    BadValue(String),
}

/// Concordant minus discordant pairs; pairs tied in either list count as
/// neither. Knight's O(n log n) merge-sort formulation.
pub fn concordance(a: &[f64], b: &[f64]) -> Result<i64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| cmp(a[i], a[j]).then(cmp(b[i], b[j])));

    let n0 = (n as i64) * (n as i64 - 1) / 2;
    // pairs tied in a, and tied in both
    let (mut tied_a, mut tied_ab) = (0i64, 0i64);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && a[idx[j]] == a[idx[i]] {
            j += 1;
        }
        tied_a += pairs(j - i);
        let mut k = i;
        while k < j {
            let mut m = k;
            while m < j && b[idx[m]] == b[idx[k]] {
                m += 1;
            }
            tied_ab += pairs(m - k);
            k = m;
        }
        i = j;
    }

    let mut seq: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let swaps = merge_count(&mut seq);

    let mut tied_b = 0i64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && seq[j] == seq[i] {
            j += 1;
        }
        tied_b += pairs(j - i);
        i = j;
    }
    Ok(n0 - tied_a - tied_b + tied_ab - 2 * swaps)
}

fn pairs(k: usize) -> i64 {
    (k as i64) * (k as i64 - 1) / 2
}

fn cmp(x: f64, y: f64) -> Ordering {
    x.partial_cmp(&y).unwrap_or(Ordering::Equal)
}

// Sorts `v` ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as i64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// Kendall τ-a: `(concordant − discordant) / (n(n−1)/2)`.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricsError::TooShort(2));
    }
    let n = a.len() as f64;
    Ok(concordance(a, b)? as f64 / (n * (n - 1.0) / 2.0))
}

/// `(v − min)/(max − min)`; an all-equal input maps to zeros.
pub fn minmax_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

/// Population std of the samples after `[0,1]` normalization (log-domain for
/// log-scaled params). Ranges over `[0, 0.5]`.
pub fn diversity_numeric(samples: &[f64], spec: &ParamSpec) -> Result<f64, MetricsError> {
    let (low, high) = match spec.kind {
        ParamKind::Float { low, high, .. } => (low, high),
        ParamKind::Int { low, high, .. } => (low as f64, high as f64),
        ParamKind::Cat { .. } => return Err(MetricsError::BadValue(spec.name.clone())),
    };
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut xs = Vec::with_capacity(samples.len());
    for &s in samples {
        if !(s >= low && s <= high) {
            return Err(MetricsError::OutOfBounds { value: s, low, high });
        }
        xs.push(spec.normalize(s));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Ok((xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Normalized Shannon entropy `−Σ q ln q / ln K` of the choice counts.
pub fn diversity_categorical(counts: &[usize], k: usize) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 || k < 2 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total as f64;
            -q * q.ln()
        })
        .sum();
    h / (k as f64).ln()
}

/// Mean of the per-parameter diversity scores of one algorithm's configurations.
pub fn algorithm_diversity(
    configs: &[Configuration],
    space: &SearchSpace,
    algorithm_id: &str,
) -> Result<f64, MetricsError> {
    let alg = space
        .algorithm(algorithm_id)
        .map_err(|_| MetricsError::BadValue(algorithm_id.to_string()))?;
    if let Some(c) = configs.iter().find(|c| c.algorithm != algorithm_id) {
        return Err(MetricsError::AlgorithmMismatch {
            expected: algorithm_id.to_string(),
            found: c.algorithm.clone(),
        });
    }
    if alg.params.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in &alg.params {
        let score = match &p.kind {
            ParamKind::Cat { choices } => {
                let mut counts = vec![0usize; choices.len()];
                for c in configs {
                    match c.get(&p.name) {
                        Some(ParamValue::Cat(v)) => {
                            let i = choices
                                .iter()
                                .position(|x| x == v)
                                .ok_or_else(|| MetricsError::BadValue(p.name.clone()))?;
                            counts[i] += 1;
                        }
                        _ => return Err(MetricsError::BadValue(p.name.clone())),
                    }
                }
                diversity_categorical(&counts, choices.len())
            }
            _ => {
                let samples = configs
                    .iter()
                    .map(|c| c.get(&p.name).and_then(ParamValue::as_f64))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| MetricsError::BadValue(p.name.clone()))?;
                diversity_numeric(&samples, p)?
            }
        };
        total += score;
    }
    Ok(total / alg.params.len() as f64)
}
