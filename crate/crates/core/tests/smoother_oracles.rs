use s3attn_core::params::{grad_check_model, Ctx, ParamStore};
use s3attn_core::smoother::*;
use s3attn_numerics::kernels::{self, Mode, RunningStats};
use s3attn_numerics::{ComplexSpectrum, Graph, Probe, RngState, Tensor};

fn gaussian(shape: &[usize], rng: &mut RngState) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn random_spectrum(n: usize, d: usize, rng: &mut RngState) -> ComplexSpectrum {
    let h = n / 2 + 1;
    ComplexSpectrum::new(gaussian(&[h, d], rng), gaussian(&[h, d], rng)).unwrap()
}

/// `X·S` with `S` block diagonal, each `s×s` block filled with `1/s`.
fn times_s(x: &Tensor, fold: usize) -> Tensor {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = d / fold;
    let smat = Tensor::from_fn(&[d, d], |f| if f / d / s == f % d / s { 1.0 / s as f64 } else { 0.0 });
    let mut out = Tensor::zeros(&[b, n, d]);
    for bi in 0..b {
        for t in 0..n {
            for c in 0..d {
                let v: f64 = (0..d).map(|k| x.at(&[bi, t, k]) * smat.at(&[k, c])).sum();
                out.set(&[bi, t, c], v);
            }
        }
    }
    out
}

/// Real kernel whose half spectrum is `l` (imaginary parts of the DC and
/// Nyquist bins do not survive a real inverse), by direct summation.
fn kernel_from_spectrum(l: &ComplexSpectrum, n: usize, col: usize) -> Vec<f64> {
    let h = n / 2 + 1;
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            for k in 0..h {
                let theta = 2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                let (re, im) = (l.re.at(&[k, col]), l.im.at(&[k, col]));
                let term = re * theta.cos() - im * theta.sin();
                let weight = if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
                    1.0
                } else {
                    2.0
                };
                acc += weight * term;
            }
            acc / n as f64
        })
        .collect()
}

/// Column-wise circular convolution of `X·S` with `irfft(L)`.
fn time_domain_oracle(x: &Tensor, l: &ComplexSpectrum, fold: usize) -> Tensor {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xs = times_s(x, fold);
    let mut out = Tensor::zeros(&[b, n, d]);
    for c in 0..d {
        let kernel = kernel_from_spectrum(l, n, c);
        for bi in 0..b {
            for t in 0..n {
                let v: f64 = (0..n).map(|j| kernel[(t + n - j) % n] * xs.at(&[bi, j, c])).sum();
                out.set(&[bi, t, c], v);
            }
        }
    }
    out
}

#[test]
fn segment_average_matches_explicit_matrix() {
    let mut rng = RngState::new(1);
    let x = gaussian(&[2, 8, 6], &mut rng);
    let avg = segment_average(&x, 3).unwrap();
    let replicated = Tensor::from_fn(&[2, 8, 6], |f| avg.data()[(f / 6) * 3 + (f % 6) / 2]);
    assert!(replicated.max_abs_diff(&times_s(&x, 3)) < 1e-12);
}

#[test]
fn convolution_theorem_equivalence() {
    let mut rng = RngState::new(2);
    for &(n, d, fold) in &[
        (1, 2, 1),
        (2, 4, 2),
        (7, 6, 3),
        (16, 8, 4),
        (33, 12, 6),
        (64, 16, 8),
        (100, 10, 5),
    ] {
        let x = gaussian(&[2, n, d], &mut rng);
        let l = random_spectrum(n, d, &mut rng);
        let got = fourier_convolve(&x, &l, fold).unwrap();
        let want = time_domain_oracle(&x, &l, fold);
        let err = got.max_abs_diff(&want);
        assert!(err < 1e-9, "n={n} d={d}: {err}");
    }
}

#[test]
fn delta_and_zero_spectra() {
    let mut rng = RngState::new(3);
    let (n, d) = (10, 6);
    let x = gaussian(&[1, n, d], &mut rng);
    let h = n / 2 + 1;
    let delta = ComplexSpectrum::new(Tensor::ones(&[h, d]), Tensor::zeros(&[h, d])).unwrap();
    assert!(fourier_convolve(&x, &delta, 2).unwrap().max_abs_diff(&times_s(&x, 2)) < 1e-12);
    let zero = ComplexSpectrum::zeros(&[h, d]);
    assert_eq!(fourier_convolve(&x, &zero, 2).unwrap().max_abs(), 0.0);
}

#[test]
fn linear_in_tokens_and_spectrum() {
    let mut rng = RngState::new(4);
    let (n, d, fold) = (12, 8, 4);
    let x1 = gaussian(&[1, n, d], &mut rng);
    let x2 = gaussian(&[1, n, d], &mut rng);
    let l1 = random_spectrum(n, d, &mut rng);
    let l2 = random_spectrum(n, d, &mut rng);
    let (a, b) = (0.7, -1.3);
    let combo_x = x1.scale(a).add(&x2.scale(b)).unwrap();
    let lhs = fourier_convolve(&combo_x, &l1, fold).unwrap();
    let rhs = fourier_convolve(&x1, &l1, fold)
        .unwrap()
        .scale(a)
        .add(&fourier_convolve(&x2, &l1, fold).unwrap().scale(b))
        .unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    let combo_l = ComplexSpectrum::new(
        l1.re.scale(a).add(&l2.re.scale(b)).unwrap(),
        l1.im.scale(a).add(&l2.im.scale(b)).unwrap(),
    )
    .unwrap();
    let lhs = fourier_convolve(&x1, &combo_l, fold).unwrap();
    let rhs = fourier_convolve(&x1, &l1, fold)
        .unwrap()
        .scale(a)
        .add(&fourier_convolve(&x1, &l2, fold).unwrap().scale(b))
        .unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-10);
}

#[test]
fn parseval_energy() {
    let mut rng = RngState::new(5);
    for n in [9, 16] {
        let (d, fold) = (4, 2);
        let x = gaussian(&[1, n, d], &mut rng);
        let l = random_spectrum(n, d, &mut rng);
        let y = fourier_convolve(&x, &l, fold).unwrap();
        let xs = times_s(&x, fold);
        for c in 0..d {
            let energy: f64 = (0..n).map(|t| y.at(&[0, t, c]).powi(2)).sum();
            let mut spectral = 0.0;
            for k in 0..n / 2 + 1 {
                let (mut ur, mut ui) = (0.0, 0.0);
                for t in 0..n {
                    let theta = 2.0 * std::f64::consts::PI * ((k * t) % n) as f64 / n as f64;
                    ur += xs.at(&[0, t, c]) * theta.cos();
                    ui -= xs.at(&[0, t, c]) * theta.sin();
                }
                let (lr, li) = (l.re.at(&[k, c]), l.im.at(&[k, c]));
                let (yr, yi) = (ur * lr - ui * li, ur * li + ui * lr);
                let edge = k == 0 || (n % 2 == 0 && k == n / 2);
                spectral += if edge { yr * yr } else { 2.0 * (yr * yr + yi * yi) };
            }
            spectral /= n as f64;
            assert!((energy - spectral).abs() < 1e-9 * energy.max(1.0), "n={n} c={c}");
        }
    }
}

#[test]
fn shared_spectrum_within_segment_replicates() {
    let mut rng = RngState::new(6);
    let (n, d, fold) = (14, 9, 3);
    let s = d / fold;
    let x = gaussian(&[2, n, d], &mut rng);
    let base = random_spectrum(n, fold, &mut rng);
    let h = n / 2 + 1;
    let spread = |t: &Tensor| Tensor::from_fn(&[h, d], |f| t.at(&[f / d, (f % d) / s]));
    let l = ComplexSpectrum::new(spread(&base.re), spread(&base.im)).unwrap();
    let y = fourier_convolve(&x, &l, fold).unwrap();
    for b in 0..2 {
        for t in 0..n {
            for c in 0..d {
                let first = (c / s) * s;
                assert!((y.at(&[b, t, c]) - y.at(&[b, t, first])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn kaiming_spectrum_statistics() {
    let (n, d) = (1024, 64);
    let l = init_l_kaiming(n, d, &mut RngState::new(7)).unwrap();
    let values: Vec<f64> = l.re.data().iter().chain(l.im.data()).copied().collect();
    let count = values.len() as f64;
    let mean = values.iter().sum::<f64>() / count;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0);
    let target = 2.0 / (2.0 * d as f64);
    assert!((var / target - 1.0).abs() < 0.05, "variance {var} vs {target}");
    assert!(mean.abs() < 3.0 * (target / count).sqrt(), "mean {mean}");
    assert_eq!(l, init_l_kaiming(n, d, &mut RngState::new(7)).unwrap());
}

fn build(n: usize, d: usize, fold: usize, dropout: f64, seed: u64) -> (Smoother, ParamStore) {
    let mut store = ParamStore::new();
    let sm = Smoother::new(
        SmootherConfig::new(n, d, fold, dropout),
        &mut store,
        "smoother",
        &mut RngState::new(seed),
    )
    .unwrap();
    (sm, store)
}

#[test]
fn stem_matches_primitive_composition() {
    let (n, d) = (16, 8);
    let (mut sm, mut store) = build(n, d, 2, 0.0, 8);
    let mut rng = RngState::new(9);
    *store.get_mut(sm.bn_gain) = Tensor::from_fn(&[n], |_| 1.0 + 0.1 * rng.normal());
    *store.get_mut(sm.bn_bias) = Tensor::from_fn(&[n], |_| 0.1 * rng.normal());
    let x = gaussian(&[2, n, d], &mut rng);
    let smooth = gaussian(&[2, n, d], &mut rng);

    let mut g = Graph::new();
    let mut ctx_rng = RngState::new(0);
    let mut ctx = Ctx::new(&mut g, &store, Mode::Train, &mut ctx_rng);
    let (sv, xv) = (ctx.g.constant(smooth.clone()), ctx.g.constant(x.clone()));
    let out = sm.stem(&mut ctx, sv, xv).unwrap();
    let got = g.value(out).clone();
    assert_eq!(got.shape(), &[2, n, d]);

    let cat = Tensor::from_fn(&[2, n, 2 * d], |f| {
        let (row, c) = (f / (2 * d), f % (2 * d));
        if c < d {
            smooth.data()[row * d + c]
        } else {
            x.data()[row * d + c - d]
        }
    });
    let conv = kernels::conv1d_nlc(&cat, store.get(sm.stem_kernel), Some(store.get(sm.stem_bias)), 1).unwrap();
    let mut running = RunningStats::new(n);
    let bn = kernels::batch_norm(
        &conv,
        1,
        store.get(sm.bn_gain),
        store.get(sm.bn_bias),
        &mut running,
        Mode::Train,
    )
    .unwrap();
    let want = kernels::relu(&bn);
    assert!(got.max_abs_diff(&want) < 1e-12);
    assert_eq!(sm.running, running);
}

#[test]
fn stem_of_zeros_is_zero() {
    let (n, d) = (6, 4);
    let (mut sm, mut store) = build(n, d, 2, 0.0, 10);
    *store.get_mut(sm.stem_bias) = Tensor::zeros(&[d]);
    let mut g = Graph::new();
    let mut rng = RngState::new(0);
    let mut ctx = Ctx::new(&mut g, &store, Mode::Train, &mut rng);
    let z = ctx.g.constant(Tensor::zeros(&[2, n, d]));
    let out = sm.stem(&mut ctx, z, z).unwrap();
    assert_eq!(g.value(out).max_abs(), 0.0);
}

#[test]
fn forward_is_pre_stem_then_stem() {
    let (n, d, fold) = (12, 8, 4);
    let (sm, store) = build(n, d, fold, 0.2, 11);
    let x = gaussian(&[3, n, d], &mut RngState::new(12));

    let mut g = Graph::new();
    let mut rng = RngState::new(5);
    let mut ctx = Ctx::new(&mut g, &store, Mode::Train, &mut rng);
    let xv = ctx.g.constant(x.clone());
    let mut whole = sm.clone();
    let out = whole.forward(&mut ctx, xv).unwrap();
    let got = g.value(out).clone();

    let mut g2 = Graph::new();
    let mut rng2 = RngState::new(5);
    let mut ctx2 = Ctx::new(&mut g2, &store, Mode::Train, &mut rng2);
    let xv2 = ctx2.g.constant(x.clone());
    let mut parts = sm.clone();
    let pre = parts.pre_stem(&mut ctx2, xv2).unwrap();
    let out2 = parts.stem(&mut ctx2, pre, xv2).unwrap();
    assert_eq!(&got, g2.value(out2));

    let spectrum = ComplexSpectrum::new(store.get(sm.l_re).clone(), store.get(sm.l_im).clone()).unwrap();
    assert_eq!(g2.value(pre), &fourier_convolve(&x, &spectrum, fold).unwrap());
    assert!(got.data().iter().all(|v| v.is_finite()));
}

#[test]
fn smoother_gradients() {
    let (n, d, fold) = (8, 4, 2);
    let (sm, store) = build(n, d, fold, 0.25, 13);
    let x = gaussian(&[2, n, d], &mut RngState::new(14));
    let weights = gaussian(&[2, n, d], &mut RngState::new(15));
    let report = grad_check_model(
        &store,
        &[x],
        Mode::Train,
        99,
        1e-5,
        Probe::Coordinates,
        |ctx, inputs| {
            let mut m = sm.clone();
            let y = m.forward(ctx, inputs[0])?;
            let w = ctx.g.constant(weights.clone());
            let prod = ctx.g.mul(y, w)?;
            Ok(ctx.g.sum(prod))
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn smoothness_matches_loop() {
    let mut rng = RngState::new(16);
    let v = gaussian(&[50, 3], &mut rng);
    let mut want: f64 = 0.0;
    for t in 1..50 {
        for c in 0..3 {
            want = want.max((v.at(&[t, c]) - v.at(&[t - 1, c])).abs());
        }
    }
    assert_eq!(max_adjacent_diff(&v).unwrap(), want);
    let input = gaussian(&[50], &mut rng);
    let stats = smoothness_stats(&input, &v).unwrap();
    assert_eq!(stats.max_adjacent_diff, want);
    assert_eq!(stats.a_max, input.max_abs());
}

#[test]
fn causal_convolution_matches_definition() {
    let l = [1.0, 2.0, 3.0];
    let x = [1.0, 0.0, -1.0];
    // f(0) = l0·x0, f(1) = l1·x0 + l0·x1, f(2) = l2·x0 + l1·x1 + l0·x2
    assert_eq!(causal_convolve(&l, &x), vec![1.0, 2.0, 2.0]);
}

#[test]
fn smoothness_bound_holds() {
    let s = prop2_trial(256, 1.0, 1.0, 0.1, 0.05, 500, &RngState::new(17)).unwrap();
    assert!(s.violation_rate <= 0.05, "{s:?}");
    assert!(s.empirical_quantile <= s.bound, "{s:?}");
}

#[test]
fn incoherent_input_has_nothing_to_reduce() {
    let r = incoherence_reduction_with(16, 16, 4, 1, 5, &RngState::new(18), |n, d, _| Tensor::ones(&[n, d])).unwrap();
    assert!((r.mean_mu_before - 1.0).abs() < 1e-12);
    assert!(r.mean_mu_after >= 1.0 - 1e-12);
    assert!(r.reduction_fraction <= 1e-12);
}

#[test]
fn coherent_spike_is_spread_out() {
    let r = incoherence_reduction_with(64, 64, 4, 16, 100, &RngState::new(19), |n, d, rng| {
        let mut x = Tensor::from_fn(&[n, d], |_| 0.1 * rng.normal());
        x.set(&[0, 0], x.at(&[0, 0]) + 10.0);
        x
    })
    .unwrap();
    assert!(
        r.improved_fraction >= 0.8,
        "{:?}",
        (r.mean_mu_before, r.mean_mu_after, r.improved_fraction)
    );
}

#[test]
fn long_sequences_reduce_incoherence() {
    let r = incoherence_reduction_trial(1024, 32, 4, 16, 3, &RngState::new(20)).unwrap();
    assert!(r.mean_mu_after < r.mean_mu_before, "{r:?}");
}
