//! Skeleton (CUR) approximation and incoherence diagnostics.

use s3attn_numerics::linalg::{matmul_t, random_orthonormal};
use s3attn_numerics::{matmul, pinv, spectral_norm, svd, RngState, Tensor};

use crate::error::{param_err, Result};

/// Power-iteration settings for spectral norms of residuals.
pub const SPECTRAL_TOL: f64 = 1e-10;
pub const SPECTRAL_MAX_ITER: usize = 1000;

/// Relative residual below which a reconstruction counts as exact.
pub const EXACT_RECOVERY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Spectral,
    Frobenius,
}

pub fn norm(x: &Tensor, norm: Norm) -> f64 {
    match norm {
        Norm::Spectral => spectral_norm(x, SPECTRAL_TOL, SPECTRAL_MAX_ITER),
        Norm::Frobenius => x.frobenius_norm(),
    }
}

/// `k` distinct indices drawn uniformly from `0..n`, sorted. Requests with
/// `k > n` fall back to every index.
pub fn uniform_sample_indices(n: usize, k: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(param_err("uniform_sample_indices", "sample count must be at least 1"));
    }
    if k > n {
        return Ok((0..n).collect());
    }
    let mut idx = rng.permutation(n);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Factors `C = X[:, J]`, `R = X[I, :]`, `U = pinv(X[I, J])`.
#[derive(Debug, Clone)]
pub struct SkeletonApprox {
    pub row_indices: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub c: Tensor,
    pub r: Tensor,
    pub u: Tensor,
}

impl SkeletonApprox {
    pub fn reconstruct(&self) -> Tensor {
        let cu = matmul(&self.c, &self.u).expect("factor shapes");
        matmul(&cu, &self.r).expect("factor shapes")
    }
}

fn check_indices(op: &'static str, idx: &[usize], bound: usize) -> Result<Vec<usize>> {
    if idx.is_empty() {
        return Err(param_err(op, "empty index set"));
    }
    let mut sorted = idx.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(param_err(op, "repeated index"));
    }
    if let Some(&bad) = sorted.last().filter(|&&i| i >= bound) {
        return Err(param_err(op, format!("index {bad} out of range {bound}")));
    }
    Ok(sorted)
}

/// Skeleton factors of `x` for the given rows and columns (sorted
/// internally; order of the inputs does not matter).
pub fn cur_decompose(x: &Tensor, rows: &[usize], cols: &[usize]) -> Result<SkeletonApprox> {
    if x.rank() != 2 {
        return Err(param_err(
            "cur_decompose",
            format!("expected a matrix, got {:?}", x.shape()),
        ));
    }
    let (n, d) = (x.rows(), x.cols());
    let rows = check_indices("cur_decompose", rows, n)?;
    let cols = check_indices("cur_decompose", cols, d)?;
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..d).collect();
    let c = x.select(&all_rows, &cols);
    let r = x.select(&rows, &all_cols);
    let u = pinv(&x.select(&rows, &cols))?;
    Ok(SkeletonApprox {
        row_indices: rows,
        col_indices: cols,
        c,
        r,
        u,
    })
}

/// `‖x − C·U·R‖` in the requested norm.
pub fn cur_error(x: &Tensor, approx: &SkeletonApprox, which: Norm) -> Result<f64> {
    let residual = x.sub(&approx.reconstruct())?;
    Ok(norm(&residual, which))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncoherenceReport {
    pub rank_used: usize,
    pub mu_row: f64,
    pub mu_col: f64,
    pub mu: f64,
}

/// Smallest `μ` with `max_i ‖eᵢᵀW‖² ≤ μr/n` and `max_i ‖eᵢᵀV‖² ≤ μr/d` for
/// the leading `r` singular vectors. If `r` exceeds the numerical rank the
/// trailing vectors are still used as returned by the SVD.
pub fn incoherence(x: &Tensor, r: usize) -> Result<IncoherenceReport> {
    if x.rank() != 2 || r < 1 || r > x.rows().min(x.cols()) {
        return Err(param_err(
            "incoherence",
            format!("rank {r} for matrix of shape {:?}", x.shape()),
        ));
    }
    let s = svd(x)?;
    let leverage = |f: &Tensor| -> f64 {
        let max_row = (0..f.rows())
            .map(|i| f.row(i)[..r].iter().map(|v| v * v).sum::<f64>())
            .fold(0.0, f64::max);
        max_row * f.rows() as f64 / r as f64
    };
    let mu_row = leverage(&s.w);
    let mu_col = leverage(&s.v);
    Ok(IncoherenceReport {
        rank_used: r,
        mu_row,
        mu_col,
        mu: mu_row.max(mu_col),
    })
}

/// Singular values log-spaced from 10 down to 1.
pub fn log_spaced_spectrum(r: usize) -> Vec<f64> {
    if r == 1 {
        return vec![1.0];
    }
    (0..r)
        .map(|i| 10f64.powf((r - 1 - i) as f64 / (r - 1) as f64))
        .collect()
}

/// `W·Σ·Vᵀ` with random orthonormal `W`, `V` and log-spaced `Σ`.
pub fn generate_incoherent_lowrank(n: usize, d: usize, r: usize, rng: &mut RngState) -> Result<Tensor> {
    if r < 1 || r > n.min(d) {
        return Err(param_err(
            "generate_incoherent_lowrank",
            format!("rank {r} for {n}×{d}"),
        ));
    }
    let w = random_orthonormal(n, r, rng);
    let v = random_orthonormal(d, r, rng);
    let sigma = log_spaced_spectrum(r);
    let ws = Tensor::from_fn(&[n, r], |f| w.data()[f] * sigma[f % r]);
    Ok(matmul_t(&ws, &v, false, true)?)
}

/// Samples per side `⌈c·r·ln n⌉`.
pub fn samples_for(c: f64, r: usize, n: usize) -> usize {
    (c * r as f64 * (n as f64).ln()).ceil() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyTrialResult {
    pub n: usize,
    pub d: usize,
    pub r: usize,
    pub mu_target: f64,
    pub sample_count: usize,
    pub noise_norm: f64,
    pub error_spectral: f64,
    pub exact_recovery: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Summary {
    pub recovery_rate: f64,
    pub mean_error: f64,
    pub mean_noise_norm: f64,
    pub trials: Vec<NoisyTrialResult>,
}

pub const PROP1_CSV_HEADER: &[&str] = &["n", "d", "r", "samples", "sigma", "recovery_rate", "mean_error"];

/// One noisy skeleton reconstruction: returns `(‖X − ĈÛR̂‖₂, ‖E‖₂)` where
/// hats are taken from `x + noise`.
fn noisy_error(x: &Tensor, noise: &Tensor, rows: &[usize], cols: &[usize]) -> Result<(f64, f64)> {
    let noisy = x.add(noise)?;
    let approx = cur_decompose(&noisy, rows, cols)?;
    let err = norm(&x.sub(&approx.reconstruct())?, Norm::Spectral);
    Ok((err, norm(noise, Norm::Spectral)))
}

/// Monte-Carlo reconstruction of incoherent rank-`r` matrices from
/// `samples_per_side` uniformly sampled rows and columns, with optional
/// Gaussian noise of entrywise standard deviation `noise_sigma`.
pub fn prop1_trial(
    n: usize,
    d: usize,
    r: usize,
    samples_per_side: usize,
    noise_sigma: f64,
    trials: usize,
    rng: &RngState,
) -> Result<Prop1Summary> {
    if n == 0 || d == 0 || r == 0 || samples_per_side == 0 || trials == 0 || noise_sigma < 0.0 {
        return Err(param_err("prop1_trial", "parameters must be positive"));
    }
    let mut results = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut trng = rng.split(t as u64);
        let x = generate_incoherent_lowrank(n, d, r, &mut trng)?;
        let mu_target = incoherence(&x, r)?.mu;
        let noise = Tensor::from_fn(&[n, d], |_| noise_sigma * trng.normal());
        let rows = uniform_sample_indices(n, samples_per_side, &mut trng)?;
        let cols = uniform_sample_indices(d, samples_per_side, &mut trng)?;
        let (err, noise_norm) = noisy_error(&x, &noise, &rows, &cols)?;
        let x_norm = norm(&x, Norm::Spectral);
        results.push(NoisyTrialResult {
            n,
            d,
            r,
            mu_target,
            sample_count: samples_per_side,
            noise_norm,
            error_spectral: err,
            exact_recovery: err < EXACT_RECOVERY_TOL * x_norm,
        });
    }
    let count = results.len() as f64;
    Ok(Prop1Summary {
        recovery_rate: results.iter().filter(|t| t.exact_recovery).count() as f64 / count,
        mean_error: results.iter().map(|t| t.error_spectral).sum::<f64>() / count,
        mean_noise_norm: results.iter().map(|t| t.noise_norm).sum::<f64>() / count,
        trials: results,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseScaling {
    pub mean_error: f64,
    pub mean_error_doubled: f64,
    pub ratio: f64,
}

/// Paired comparison: each trial fixes `X`, the index sets and the noise
/// direction, and measures the error at noise `E` and `2E`.
pub fn noise_scaling_trial(
    n: usize,
    d: usize,
    r: usize,
    samples_per_side: usize,
    noise_sigma: f64,
    trials: usize,
    rng: &RngState,
) -> Result<NoiseScaling> {
    if trials == 0 || noise_sigma <= 0.0 {
        return Err(param_err("noise_scaling_trial", "needs positive noise and trial count"));
    }
    let (mut single, mut double) = (0.0, 0.0);
    for t in 0..trials {
        let mut trng = rng.split(t as u64);
        let x = generate_incoherent_lowrank(n, d, r, &mut trng)?;
        let noise = Tensor::from_fn(&[n, d], |_| noise_sigma * trng.normal());
        let rows = uniform_sample_indices(n, samples_per_side, &mut trng)?;
        let cols = uniform_sample_indices(d, samples_per_side, &mut trng)?;
        single += noisy_error(&x, &noise, &rows, &cols)?.0;
        double += noisy_error(&x, &noise.scale(2.0), &rows, &cols)?.0;
    }
    let (single, double) = (single / trials as f64, double / trials as f64);
    Ok(NoiseScaling {
        mean_error: single,
        mean_error_doubled: double,
        ratio: double / single,
    })
}
