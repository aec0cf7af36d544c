//! Representation-geometry probes over a set of hidden states.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::model::ActivationTrace;
use crate::objectives::valid_rows;
use crate::tensor::{dot, norm, Tensor};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// `exp` of the Shannon entropy of the normalized covariance spectrum of the
/// rows of `states` (`[N, d]`, `N ≥ 2`).
///
/// Rows are mean-centered and the covariance uses the `N − 1` normalizer;
/// the normalizer cancels in the ratio anyway.
pub fn effective_rank(states: &Tensor) -> Result<f64> {
    let spectrum = covariance_spectrum(states)?;
    Ok(effective_rank_from_spectrum(&spectrum))
}

/// Covariance eigenvalues, ascending and clamped at zero.
pub fn covariance_spectrum(states: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = (states.rows(), states.cols());
    if states.shape().len() != 2 || n < 2 {
        return Err(Error::DegenerateInput(format!(
            "effective rank needs at least 2 rows, got shape {:?}",
            states.shape()
        )));
    }
    if states.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("effective_rank input".into()));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(states.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = Vec::with_capacity(n * d);
    for r in 0..n {
        centered.extend(states.row(r).iter().zip(&mean).map(|(x, m)| x - m));
    }
    let mut cov = vec![0.0; d * d];
    crate::tensor::matmul_tn(&centered, &centered, &mut cov, n, d, d);
    let cov = Matrix::from_row_major(d, d, cov.iter().map(|c| c / (n - 1) as f64).collect())?.symmetrized();
    if cov.max_abs() == 0.0 {
        return Err(Error::DegenerateInput("all rows are identical".into()));
    }
    let eig = symmetric_eigen(&cov)?;
    Ok(eig.values.into_iter().map(|v| v.max(0.0)).collect())
}

/// `exp(−Σ pᵢ ln pᵢ)` with `pᵢ = λᵢ / Σλ` over eigenvalues above the floor.
pub fn effective_rank_from_spectrum(spectrum: &[f64]) -> f64 {
    let top = spectrum.iter().fold(0.0f64, |m, &v| m.max(v));
    let kept: Vec<f64> = spectrum.iter().copied().filter(|&v| v >= EIGEN_FLOOR * top && v > 0.0).collect();
    let total: f64 = kept.iter().sum();
    let entropy: f64 = kept
        .iter()
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

/// Distinct unordered pairs `(i, j)`, `i < j < n`. When `num_pairs` covers
/// all `n(n−1)/2` pairs every pair is returned in lexicographic order;
/// otherwise `num_pairs` of them are drawn without replacement.
pub fn sample_pairs(n: usize, num_pairs: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    if num_pairs >= total {
        return (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    }
    let mut picks = index::sample(rng, total, num_pairs).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|p| decode_pair(n, p)).collect()
}

fn decode_pair(n: usize, mut p: usize) -> (usize, usize) {
    let mut i = 0;
    while p >= n - 1 - i {
        p -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseCosine {
    pub mean: f64,
    pub num_pairs: usize,
    /// Zero-norm rows left out before sampling.
    pub skipped_rows: usize,
}

/// Mean cosine similarity over sampled pairs of distinct rows. Zero-norm rows
/// are excluded and counted.
pub fn avg_pairwise_cosine(states: &Tensor, num_pairs: usize, rng: &mut impl Rng) -> Result<PairwiseCosine> {
    let n = states.rows();
    if states.shape().len() != 2 || n < 2 {
        return Err(Error::DegenerateInput(format!(
            "pairwise cosine needs at least 2 rows, got shape {:?}",
            states.shape()
        )));
    }
    let live: Vec<usize> = (0..n).filter(|&r| norm(states.row(r)) > 0.0).collect();
    let skipped_rows = n - live.len();
    if live.len() < 2 {
        return Err(Error::DegenerateInput(format!("{skipped_rows} of {n} rows have zero norm")));
    }
    let pairs = sample_pairs(live.len(), num_pairs, rng);
    let sum: f64 = pairs
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (states.row(live[i]), states.row(live[j]));
            dot(a, b) / (norm(a) * norm(b))
        })
        .sum();
    Ok(PairwiseCosine {
        mean: sum / pairs.len() as f64,
        num_pairs: pairs.len(),
        skipped_rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub num_pairs: usize,
    /// Take a snapshot every this many steps.
    pub every: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            num_pairs: 1024,
            every: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySnapshot {
    pub step: usize,
    pub effective_rank: f64,
    pub avg_cosine: f64,
    pub num_tokens: usize,
    pub num_pairs: usize,
}

/// Both probes on `states`; the pair sample is a pure function of
/// `(cfg.seed, step)`.
pub fn snapshot(states: &Tensor, step: usize, cfg: &ProbeConfig) -> Result<GeometrySnapshot> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let effective_rank = effective_rank(states)?;
    let cos = avg_pairwise_cosine(states, cfg.num_pairs, &mut rng)?;
    Ok(GeometrySnapshot {
        step,
        effective_rank,
        avg_cosine: cos.mean,
        num_tokens: states.rows(),
        num_pairs: cos.num_pairs,
    })
}

/// Snapshot of the post-final-norm states at the valid positions of a trace.
pub fn snapshot_trace(g: &Graph, trace: &ActivationTrace, step: usize, cfg: &ProbeConfig) -> Result<GeometrySnapshot> {
    let rows = valid_rows(trace.batch, trace.seq_len);
    let states = g.tensor(trace.final_hidden).select_rows(&rows)?;
    snapshot(&states, step, cfg)
}
