//! Monte-Carlo harnesses for skeleton reconstruction, incoherence and the
//! smoothing bound.

use s3attn_core::sketch::{generate_incoherent_lowrank, incoherence, noise_scaling_trial, prop1_trial, samples_for};
use s3attn_core::smoother::{incoherence_reduction_trial, prop2_bound, prop2_trial};
use s3attn_numerics::{RngState, Tensor};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::output::ResultTable;

#[derive(Debug, Clone, PartialEq)]
pub struct SketchReport {
    /// Recovery rate and mean spectral error at noise 0 and `noise_sigma`.
    pub reconstruction: ResultTable,
    /// Paired error at `E` and `2E`.
    pub noise_scaling: ResultTable,
    pub recovery_rate_noiseless: f64,
    pub noise_ratio: f64,
}

/// Skeleton reconstruction of `n×d` rank-`rank` incoherent matrices from
/// `⌈sample_multiplier·rank·ln(max(n, d))⌉` uniformly sampled rows and
/// columns.
pub fn sketch_reconstruction(cfg: &ExperimentConfig) -> Result<SketchReport> {
    let (n, d, r) = (cfg.n, cfg.d, cfg.rank);
    let samples = samples_for(cfg.sample_multiplier, r, n.max(d)).min(n.min(d));
    let root = RngState::new(cfg.seed);
    let mut reconstruction = ResultTable::new(&[
        "n",
        "d",
        "r",
        "samples",
        "sigma",
        "trials",
        "recovery_rate",
        "mean_error",
        "mean_noise_norm",
        "seed",
    ]);
    let mut noiseless = 0.0;
    for (k, sigma) in [0.0, cfg.noise_sigma].into_iter().enumerate() {
        let s = prop1_trial(n, d, r, samples, sigma, cfg.trials, &root.split(k as u64))?;
        if sigma == 0.0 {
            noiseless = s.recovery_rate;
        }
        reconstruction.push(vec![
            n.into(),
            d.into(),
            r.into(),
            samples.into(),
            sigma.into(),
            cfg.trials.into(),
            s.recovery_rate.into(),
            s.mean_error.into(),
            s.mean_noise_norm.into(),
            cfg.seed.into(),
        ])?;
    }
    let scaling = noise_scaling_trial(n, d, r, samples, cfg.noise_sigma, cfg.trials, &root.split(2))?;
    let mut noise_scaling = ResultTable::new(&[
        "sigma",
        "trials",
        "mean_error",
        "mean_error_doubled_noise",
        "ratio",
        "seed",
    ]);
    noise_scaling.push(vec![
        cfg.noise_sigma.into(),
        cfg.trials.into(),
        scaling.mean_error.into(),
        scaling.mean_error_doubled.into(),
        scaling.ratio.into(),
        cfg.seed.into(),
    ])?;
    Ok(SketchReport {
        reconstruction,
        noise_scaling,
        recovery_rate_noiseless: noiseless,
        noise_ratio: scaling.ratio,
    })
}

/// Incoherence of reference matrices: all-ones and a single spike at
/// rank 1, a Gaussian matrix and a generated incoherent matrix at `rank`.
pub fn incoherence_cases(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let (n, d, r) = (cfg.n, cfg.d, cfg.rank);
    let mut rng = RngState::new(cfg.seed);
    let mut spike = Tensor::zeros(&[n, d]);
    spike.set(&[0, 0], 1.0);
    let cases = [
        ("all_ones", Tensor::ones(&[n, d]), 1),
        ("single_spike", spike, 1),
        ("gaussian", Tensor::from_fn(&[n, d], |_| rng.normal()), r),
        (
            "generated_incoherent",
            generate_incoherent_lowrank(n, d, r, &mut rng)?,
            r,
        ),
    ];
    let mut t = ResultTable::new(&["case", "n", "d", "r", "mu_row", "mu_col", "mu", "seed"]);
    for (name, x, rank) in cases {
        let rep = incoherence(&x, rank)?;
        t.push(vec![
            name.into(),
            n.into(),
            d.into(),
            rank.into(),
            rep.mu_row.into(),
            rep.mu_col.into(),
            rep.mu.into(),
            cfg.seed.into(),
        ])?;
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothBoundReport {
    pub table: ResultTable,
    /// Violation rate at `n`.
    pub violation_rate: f64,
    /// `bound(4n)/bound(n)`.
    pub bound_ratio: f64,
}

/// Smoothness-bound Monte-Carlo at `n` and `4n`.
pub fn smooth_bound(cfg: &ExperimentConfig) -> Result<SmoothBoundReport> {
    let root = RngState::new(cfg.seed);
    let mut table = ResultTable::new(&[
        "n",
        "sigma",
        "a_max",
        "b_max",
        "delta",
        "trials",
        "bound",
        "empirical_quantile",
        "violation_rate",
        "bound_ratio_vs_first",
        "seed",
    ]);
    let base = prop2_bound(cfg.n, cfg.sigma, cfg.a_max, cfg.b_max, cfg.delta);
    let mut violation_rate = 0.0;
    for (k, n) in [cfg.n, 4 * cfg.n].into_iter().enumerate() {
        let s = prop2_trial(
            n,
            cfg.sigma,
            cfg.a_max,
            cfg.b_max,
            cfg.delta,
            cfg.trials,
            &root.split(k as u64),
        )?;
        if k == 0 {
            violation_rate = s.violation_rate;
        }
        table.push(vec![
            n.into(),
            cfg.sigma.into(),
            cfg.a_max.into(),
            cfg.b_max.into(),
            cfg.delta.into(),
            cfg.trials.into(),
            s.bound.into(),
            s.empirical_quantile.into(),
            s.violation_rate.into(),
            (s.bound / base).into(),
            cfg.seed.into(),
        ])?;
    }
    Ok(SmoothBoundReport {
        table,
        violation_rate,
        bound_ratio: prop2_bound(4 * cfg.n, cfg.sigma, cfg.a_max, cfg.b_max, cfg.delta) / base,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncoherenceReductionReport {
    pub summary: ResultTable,
    pub per_trial: ResultTable,
    pub improved_fraction: f64,
    pub reduction_fraction: f64,
}

/// Incoherence (rank `r_rank`) of spiky `n×d` tokens before and after a
/// Kaiming-initialized Fourier convolution with `fold` segments.
pub fn smooth_incoherence(cfg: &ExperimentConfig) -> Result<IncoherenceReductionReport> {
    let rep = incoherence_reduction_trial(cfg.n, cfg.d, cfg.fold, cfg.r_rank, cfg.trials, &RngState::new(cfg.seed))?;
    let mut summary = ResultTable::new(&[
        "n",
        "d",
        "fold",
        "r",
        "trials",
        "mean_mu_before",
        "mean_mu_after",
        "reduction_fraction",
        "improved_fraction",
        "seed",
    ]);
    summary.push(vec![
        cfg.n.into(),
        cfg.d.into(),
        cfg.fold.into(),
        cfg.r_rank.into(),
        cfg.trials.into(),
        rep.mean_mu_before.into(),
        rep.mean_mu_after.into(),
        rep.reduction_fraction.into(),
        rep.improved_fraction.into(),
        cfg.seed.into(),
    ])?;
    let mut per_trial = ResultTable::new(&["trial", "mu_before", "mu_after", "seed"]);
    for (t, &(before, after)) in rep.per_trial.iter().enumerate() {
        per_trial.push(vec![t.into(), before.into(), after.into(), cfg.seed.into()])?;
    }
    Ok(IncoherenceReductionReport {
        summary,
        per_trial,
        improved_fraction: rep.improved_fraction,
        reduction_fraction: rep.reduction_fraction,
    })
}
