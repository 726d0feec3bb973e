//! Segment averaging, learnable frequency-domain convolution and the
//! convolution stem, plus the smoothness and incoherence harnesses.

use s3attn_numerics::kernels::{Mode, RunningStats};
use s3attn_numerics::{ComplexSpectrum, Graph, RngState, Tensor, Var};

use crate::error::{param_err, Result};
use crate::params::{uniform_init, Ctx, ParamId, ParamStore};
use crate::sketch::incoherence;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmootherConfig {
    pub n: usize,
    pub d: usize,
    pub fold: usize,
    pub dropout_p: f64,
    /// When off, segment means are replicated across their columns
    /// without convolution.
    pub fourier_conv: bool,
    /// When off, the smoothed tokens are returned without the stem.
    pub conv_stem: bool,
}

impl SmootherConfig {
    pub fn new(n: usize, d: usize, fold: usize, dropout_p: f64) -> Self {
        Self {
            n,
            d,
            fold,
            dropout_p,
            fourier_conv: true,
            conv_stem: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(param_err("smoother", "n and d must be positive"));
        }
        check_fold(self.d, self.fold)?;
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(param_err(
                "smoother",
                format!("dropout {} outside [0, 1)", self.dropout_p),
            ));
        }
        Ok(())
    }
}

fn check_fold(d: usize, fold: usize) -> Result<()> {
    if fold == 0 || !d.is_multiple_of(fold) {
        return Err(param_err(
            "segment_average",
            format!("feature dimension {d} is not divisible by fold {fold}"),
        ));
    }
    Ok(())
}

/// Column index of the segment mean feeding each of the `d` output columns.
pub fn segment_of_column(d: usize, fold: usize) -> Vec<usize> {
    let s = d / fold;
    (0..d).map(|c| c / s).collect()
}

/// Standard deviation of the spectrum initializer: `√(2/fan_in)` with
/// `fan_in = 2d` (trailing dimensions of a `(⌊n/2⌋+1, d, 2)` weight).
pub fn kaiming_std(d: usize) -> f64 {
    (2.0 / (2 * d) as f64).sqrt()
}

/// Kaiming-normal learnable spectrum of shape `[⌊n/2⌋+1, d]`, drawn in
/// `(frequency, column, real/imag)` order.
pub fn init_l_kaiming(n: usize, d: usize, rng: &mut RngState) -> Result<ComplexSpectrum> {
    if n == 0 || d == 0 {
        return Err(param_err("init_L_kaiming", "n and d must be positive"));
    }
    let h = n / 2 + 1;
    let std = kaiming_std(d);
    let mut re = Tensor::zeros(&[h, d]);
    let mut im = Tensor::zeros(&[h, d]);
    for i in 0..h * d {
        re.data_mut()[i] = std * rng.normal();
        im.data_mut()[i] = std * rng.normal();
    }
    Ok(ComplexSpectrum::new(re, im)?)
}

/// Means of `fold` contiguous feature segments: `[B, n, d] → [B, n, fold]`.
pub fn segment_average(x: &Tensor, fold: usize) -> Result<Tensor> {
    if let Some(&d) = x.shape().last() {
        check_fold(d, fold)?;
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.segment_mean(xv, fold)?;
    Ok(g.value(y).clone())
}

/// `irfft(rfft(X·S) · L)` along the sequence axis of `[B, n, d]` tokens.
pub fn fourier_convolve(x: &Tensor, l: &ComplexSpectrum, fold: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(param_err(
            "fourier_convolve",
            format!("expected [B, n, d], got {:?}", x.shape()),
        ));
    }
    check_fold(x.shape()[2], fold)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let u = g.segment_mean(xv, fold)?;
    let lr = g.constant(l.re.clone());
    let li = g.constant(l.im.clone());
    if l.re.shape() != [x.shape()[1] / 2 + 1, x.shape()[2]] {
        return Err(param_err(
            "fourier_convolve",
            format!("spectrum shape {:?} does not fit tokens {:?}", l.re.shape(), x.shape()),
        ));
    }
    let y = g.fourier_conv(u, lr, li)?;
    Ok(g.value(y).clone())
}

/// Largest `|v[t] − v[t−1]|` over `t ∈ [1, n)` (non-circular), maximized
/// over columns when `v` is `[n, m]`.
pub fn max_adjacent_diff(v: &Tensor) -> Result<f64> {
    let (n, m) = match v.shape() {
        [n] => (*n, 1),
        [n, m] => (*n, *m),
        s => {
            return Err(param_err(
                "smoothness_stats",
                format!("expected [n] or [n, m], got {s:?}"),
            ))
        }
    };
    if n < 2 {
        return Err(param_err("smoothness_stats", format!("need at least 2 steps, got {n}")));
    }
    let d = v.data();
    let mut best: f64 = 0.0;
    for t in 1..n {
        for c in 0..m {
            best = best.max((d[t * m + c] - d[(t - 1) * m + c]).abs());
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessStats {
    /// Largest adjacent difference of the convolved sequence.
    pub max_adjacent_diff: f64,
    /// Largest magnitude of the input.
    pub a_max: f64,
    /// Largest adjacent difference of the input.
    pub b_max: f64,
}

pub fn smoothness_stats(input: &Tensor, output: &Tensor) -> Result<SmoothnessStats> {
    Ok(SmoothnessStats {
        max_adjacent_diff: max_adjacent_diff(output)?,
        a_max: input.max_abs(),
        b_max: max_adjacent_diff(input)?,
    })
}

/// `f(t) = Σ_{i≤t} l[t−i]·x[i]` (0-based causal convolution).
pub fn causal_convolve(l: &[f64], x: &[f64]) -> Vec<f64> {
    (0..x.len()).map(|t| (0..=t).map(|i| l[t - i] * x[i]).sum()).collect()
}

/// High-probability bound on the largest adjacent difference of `f`:
/// `b·σ·√(ln(2n/δ)/(2n)) + a·σ·√(ln(2/δ)/(2n²))`.
pub fn prop2_bound(n: usize, sigma: f64, a_max: f64, b_max: f64, delta: f64) -> f64 {
    let n = n as f64;
    b_max * sigma * ((2.0 * n / delta).ln() / (2.0 * n)).sqrt()
        + a_max * sigma * ((2.0 / delta).ln() / (2.0 * n * n)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop2Summary {
    pub bound: f64,
    pub empirical_quantile: f64,
    pub violation_rate: f64,
}

/// Clipped random walk in `[−a, a]` with increments uniform on `[−b, b]`,
/// started uniformly in `[−a, a]`.
pub fn clipped_walk(n: usize, a_max: f64, b_max: f64, rng: &mut RngState) -> Vec<f64> {
    let mut x = Vec::with_capacity(n);
    let mut cur = rng.uniform_range(-a_max, a_max);
    for _ in 0..n {
        x.push(cur);
        cur = (cur + rng.uniform_range(-b_max, b_max)).clamp(-a_max, a_max);
    }
    x
}

/// Monte-Carlo check of the smoothness bound for random convolutions
/// `l ~ N(0, σ²/n²)` of bounded, slowly varying inputs.
pub fn prop2_trial(
    n: usize,
    sigma: f64,
    a_max: f64,
    b_max: f64,
    delta: f64,
    trials: usize,
    rng: &RngState,
) -> Result<Prop2Summary> {
    if n < 2 || trials == 0 || sigma < 0.0 || a_max < 0.0 || b_max < 0.0 || !(delta > 0.0 && delta < 1.0) {
        return Err(param_err("prop2_trial", "invalid parameters"));
    }
    let bound = prop2_bound(n, sigma, a_max, b_max, delta);
    let mut maxima: Vec<f64> = (0..trials)
        .map(|t| {
            let mut trng = rng.split(t as u64);
            let x = clipped_walk(n, a_max, b_max, &mut trng);
            let l: Vec<f64> = (0..n).map(|_| sigma / n as f64 * trng.normal()).collect();
            let f = causal_convolve(&l, &x);
            f.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
        })
        .collect();
    let violations = maxima.iter().filter(|&&m| m > bound).count();
    maxima.sort_by(f64::total_cmp);
    let q = (((1.0 - delta) * trials as f64).ceil() as usize).clamp(1, trials) - 1;
    Ok(Prop2Summary {
        bound,
        empirical_quantile: maxima[q],
        violation_rate: violations as f64 / trials as f64,
    })
}

/// Gaussian background of scale 0.1 plus `⌈0.05·n⌉` entries of magnitude 10
/// with random sign at random positions.
pub fn spiky_matrix(n: usize, d: usize, rng: &mut RngState) -> Tensor {
    let mut x = Tensor::from_fn(&[n, d], |_| 0.1 * rng.normal());
    let spikes = (0.05 * n as f64).ceil() as usize;
    for _ in 0..spikes {
        let i = rng.below(n as u64) as usize;
        let j = rng.below(d as u64) as usize;
        let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        x.set(&[i, j], 10.0 * sign);
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncoherenceReduction {
    pub mean_mu_before: f64,
    pub mean_mu_after: f64,
    /// `1 − after/before` of the means.
    pub reduction_fraction: f64,
    /// Share of trials where `μ` went down.
    pub improved_fraction: f64,
    pub per_trial: Vec<(f64, f64)>,
}

/// Incoherence of spiky tokens before and after a freshly initialized
/// Fourier convolution (segment average + spectrum product, no stem).
pub fn incoherence_reduction_trial(
    n: usize,
    d: usize,
    fold: usize,
    r_rank: usize,
    trials: usize,
    rng: &RngState,
) -> Result<IncoherenceReduction> {
    incoherence_reduction_with(n, d, fold, r_rank, trials, rng, spiky_matrix)
}

/// As [`incoherence_reduction_trial`] with a caller-supplied generator.
pub fn incoherence_reduction_with(
    n: usize,
    d: usize,
    fold: usize,
    r_rank: usize,
    trials: usize,
    rng: &RngState,
    generate: impl Fn(usize, usize, &mut RngState) -> Tensor,
) -> Result<IncoherenceReduction> {
    check_fold(d, fold)?;
    if trials == 0 {
        return Err(param_err("incoherence_reduction_trial", "trials must be positive"));
    }
    let mut per_trial = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut trng = rng.split(t as u64);
        let x = generate(n, d, &mut trng);
        let l = init_l_kaiming(n, d, &mut trng)?;
        let smooth = fourier_convolve(&x.reshape(&[1, n, d])?, &l, fold)?.into_reshape(&[n, d])?;
        per_trial.push((incoherence(&x, r_rank)?.mu, incoherence(&smooth, r_rank)?.mu));
    }
    let count = trials as f64;
    let before = per_trial.iter().map(|p| p.0).sum::<f64>() / count;
    let after = per_trial.iter().map(|p| p.1).sum::<f64>() / count;
    Ok(IncoherenceReduction {
        mean_mu_before: before,
        mean_mu_after: after,
        reduction_fraction: 1.0 - after / before,
        improved_fraction: per_trial.iter().filter(|p| p.1 < p.0).count() as f64 / count,
        per_trial,
    })
}

/// Learnable smoother block.
#[derive(Debug, Clone)]
pub struct Smoother {
    pub config: SmootherConfig,
    pub l_re: ParamId,
    pub l_im: ParamId,
    pub stem_kernel: ParamId,
    pub stem_bias: ParamId,
    pub bn_gain: ParamId,
    pub bn_bias: ParamId,
    pub running: RunningStats,
}

impl Smoother {
    /// Registers parameters under `prefix` and initializes them: Kaiming
    /// spectrum, framework-default uniform stem (`±1/√(2d·3)`), unit/zero
    /// batch-norm affine.
    pub fn new(config: SmootherConfig, store: &mut ParamStore, prefix: &str, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let (n, d) = (config.n, config.d);
        let l = init_l_kaiming(n, d, rng)?;
        let bound = 1.0 / ((2 * d * 3) as f64).sqrt();
        let kernel = uniform_init(&[d, 2 * d, 3], bound, rng);
        let bias = uniform_init(&[d], bound, rng);
        Ok(Self {
            config,
            l_re: store.add(format!("{prefix}.spectrum_re"), l.re),
            l_im: store.add(format!("{prefix}.spectrum_im"), l.im),
            stem_kernel: store.add(format!("{prefix}.stem.kernel"), kernel),
            stem_bias: store.add(format!("{prefix}.stem.bias"), bias),
            bn_gain: store.add(format!("{prefix}.bn.gain"), Tensor::ones(&[n])),
            bn_bias: store.add(format!("{prefix}.bn.bias"), Tensor::zeros(&[n])),
            running: RunningStats::new(n),
        })
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.config.n || s[2] != self.config.d {
            return Err(param_err(
                "smoother",
                format!("expected [B, {}, {}], got {s:?}", self.config.n, self.config.d),
            ));
        }
        Ok(())
    }

    /// Smoothed tokens before the stem.
    pub fn pre_stem(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.check_input(ctx.g, x)?;
        let u = ctx.g.segment_mean(x, self.config.fold)?;
        if self.config.fourier_conv {
            Ok(ctx.g.fourier_conv(u, ctx.p(self.l_re), ctx.p(self.l_im))?)
        } else {
            let idx = segment_of_column(self.config.d, self.config.fold);
            Ok(ctx.g.gather(u, 2, &idx)?)
        }
    }

    /// Concatenate `[smoothed, raw]`, convolve (kernel 3, 2d → d), batch
    /// norm over sequence positions, ReLU, dropout.
    pub fn stem(&mut self, ctx: &mut Ctx, smoothed: Var, x: Var) -> Result<Var> {
        if ctx.g.shape(smoothed) != ctx.g.shape(x) {
            return Err(param_err("conv_stem", "smoothed and raw tokens differ in shape"));
        }
        let cat = ctx.g.concat(&[smoothed, x], 2)?;
        let h = ctx
            .g
            .conv1d_nlc(cat, ctx.p(self.stem_kernel), Some(ctx.p(self.stem_bias)), 1)?;
        let h = ctx.g.batch_norm(
            h,
            1,
            ctx.p(self.bn_gain),
            ctx.p(self.bn_bias),
            &mut self.running,
            ctx.mode,
        )?;
        let h = ctx.g.relu(h);
        Ok(ctx.g.dropout(h, self.config.dropout_p, ctx.rng, ctx.mode)?)
    }

    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let smoothed = self.pre_stem(ctx, x)?;
        if self.config.conv_stem {
            self.stem(ctx, smoothed, x)
        } else {
            Ok(smoothed)
        }
    }
}

/// Batch-norm mode helper for callers that only hold a flag.
pub fn mode_of(train: bool) -> Mode {
    if train {
        Mode::Train
    } else {
        Mode::Infer
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_segment_mean() {
        let x = Tensor::new(&[1, 1, 4], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(segment_average(&x, 2).unwrap().data(), &[2.0, 6.0]);
        assert_eq!(segment_average(&x, 4).unwrap(), x);
        let err = segment_average(&x, 3).unwrap_err().to_string();
        assert!(err.contains('4') && err.contains('3'), "{err}");
    }

    #[test]
    fn adjacent_differences() {
        assert_eq!(max_adjacent_diff(&Tensor::full(&[5], 2.0)).unwrap(), 0.0);
        assert_eq!(
            max_adjacent_diff(&Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap()).unwrap(),
            1.0
        );
        assert!(max_adjacent_diff(&Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn zero_noise_gives_zero_statistics() {
        let s = prop2_trial(32, 0.0, 1.0, 0.1, 0.05, 10, &RngState::new(1)).unwrap();
        assert_eq!(
            s,
            Prop2Summary {
                bound: 0.0,
                empirical_quantile: 0.0,
                violation_rate: 0.0
            }
        );
    }

    #[test]
    fn bound_shrinks_like_inverse_root() {
        let ratio = prop2_bound(1024, 1.0, 1.0, 0.1, 0.05) / prop2_bound(256, 1.0, 1.0, 0.1, 0.05);
        assert!((0.45..=0.55).contains(&ratio), "{ratio}");
    }

    #[test]
    fn walk_respects_constraints() {
        let mut rng = RngState::new(4);
        let x = clipped_walk(500, 1.0, 0.1, &mut rng);
        assert!(x.iter().all(|v| v.abs() <= 1.0));
        assert!(x.windows(2).all(|w| (w[1] - w[0]).abs() <= 0.1 + 1e-15));
    }
}
