use std::io::Write;

use s3attn_core::error::CoreError;
use s3attn_core::forecast::*;
use s3attn_core::params::{grad_check_model, Ctx, ParamStore};
use s3attn_numerics::kernels::Mode;
use s3attn_numerics::{Graph, Probe, RngState, Tensor};

const TAU: f64 = std::f64::consts::TAU;

fn series(n: usize, f: impl Fn(usize) -> f64) -> Tensor {
    Tensor::from_fn(&[1, n, 1], f)
}

#[test]
fn constant_signal_continues() {
    for n_harm in [0, 1, 5] {
        let out = fourier_extrapolate(&series(12, |_| 3.25), n_harm, 48).unwrap();
        assert!(out.data().iter().all(|v| (v - 3.25).abs() < 1e-12), "n_harm={n_harm}");
    }
}

#[test]
fn single_cosine_continues() {
    let n = 96;
    let x = series(n, |t| (TAU * 3.0 * t as f64 / n as f64).cos());
    let out = fourier_extrapolate(&x, 3, 4 * n).unwrap();
    for t in 0..5 * n {
        let want = (TAU * 3.0 * t as f64 / n as f64).cos();
        assert!((out.at(&[0, t, 0]) - want).abs() < 1e-9, "t={t}");
    }
}

#[test]
fn mixture_of_low_bins_continues() {
    let n = 64;
    let f = |t: usize| {
        let t = t as f64 / n as f64;
        1.5 + 0.7 * (TAU * 2.0 * t + 0.3).sin() - 2.0 * (TAU * 5.0 * t).cos() + 0.1 * (TAU * t - 1.0).cos()
    };
    let out = fourier_extrapolate(&series(n, f), 5, 4 * n).unwrap();
    for t in 0..5 * n {
        assert!((out.at(&[0, t, 0]) - f(t)).abs() < 1e-9, "t={t}");
    }
}

#[test]
fn all_harmonics_reproduce_input() {
    let mut rng = RngState::new(1);
    for n in [7, 16] {
        let x = Tensor::from_fn(&[2, n, 3], |_| rng.normal());
        let out = fourier_extrapolate(&x, n / 2, 0).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-9);
    }
}

#[test]
fn harmonic_order_matches_brute_force() {
    let n = 96;
    let sel = select_harmonics(n, 8).unwrap();
    assert_eq!(sel.len(), 17);
    let freq = |k: usize| {
        if k <= (n - 1) / 2 {
            k as f64
        } else {
            k as f64 - n as f64
        }
    };
    let mut brute: Vec<usize> = (0..n).collect();
    // insertion sort: stable by construction
    for i in 1..n {
        let mut j = i;
        while j > 0 && freq(brute[j - 1]).abs() > freq(brute[j]).abs() {
            brute.swap(j - 1, j);
            j -= 1;
        }
    }
    assert_eq!(sel, brute[..17].to_vec());
    assert!(sel.iter().all(|&k| freq(k).abs() <= 8.0));
    for m in 0..10 {
        let small = select_harmonics(n, m).unwrap();
        let big = select_harmonics(n, m + 1).unwrap();
        assert!(small.iter().all(|k| big.contains(k)));
    }
}

#[test]
fn standardization_round_trip() {
    let mut rng = RngState::new(2);
    let x = Tensor::from_fn(&[3, 10, 4], |_| 5.0 * rng.normal() + 2.0);
    let (z, st) = standardize(&x).unwrap();
    assert!(st.scale.data().iter().all(|&s| s >= 1.0));
    assert!(destandardize(&z, &st).unwrap().max_abs_diff(&x) < 1e-12);
}

fn config(input_len: usize, horizon: usize, channels: usize) -> ForecastConfig {
    ForecastConfig {
        input_len,
        horizon,
        channels,
        n_harm: 3,
        d: 4,
        heads: 2,
        fold: 2,
        s1: 3,
        s2: 1,
        layers: 1,
        dropout_smoother: 0.0,
        dropout_attn: 0.0,
    }
}

fn run(model: &ForecastModel, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let mut rng = RngState::new(0);
    let mut ctx = Ctx::new(&mut g, store, Mode::Infer, &mut rng);
    let xv = ctx.g.constant(x.clone());
    let y = model.clone().forward(&mut ctx, xv).unwrap();
    g.value(y).clone()
}

#[test]
fn output_shape_and_translation_consistency() {
    let mut store = ParamStore::new();
    let model = ForecastModel::new(config(12, 5, 2), &mut store, &mut RngState::new(3)).unwrap();
    let mut rng = RngState::new(4);
    let x = Tensor::from_fn(&[3, 12, 2], |_| rng.normal());
    let y = run(&model, &store, &x);
    assert_eq!(y.shape(), &[3, 5, 2]);
    let shifted = run(&model, &store, &x.map(|v| v + 7.5));
    assert!(shifted.max_abs_diff(&y.map(|v| v + 7.5)) < 1e-10);
}

#[test]
fn neutral_trunk_extrapolates_sinusoid() {
    let (n, horizon) = (24, 12);
    let mut cfg = config(n, horizon, 1);
    cfg.d = 2;
    cfg.heads = 1;
    cfg.fold = 1;
    cfg.n_harm = 2;
    let mut store = ParamStore::new();
    let model = ForecastModel::new(cfg, &mut store, &mut RngState::new(5)).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id).scale(1e-9);
        *store.get_mut(id) = t;
    }
    // post ∘ embed = identity on the single channel
    *store.get_mut(model.embedding) = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    *store.get_mut(model.post_projection) = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
    let f = |t: usize| 4.0 + 2.0 * (TAU * 2.0 * t as f64 / n as f64 + 0.4).sin();
    let x = series(n, f);
    let y = run(&model, &store, &x);
    for h in 0..horizon {
        assert!(
            (y.at(&[0, h, 0]) - f(n + h)).abs() < 1e-6,
            "h={h}: {}",
            y.at(&[0, h, 0])
        );
    }
}

#[test]
fn forecast_gradients() {
    let mut store = ParamStore::new();
    let model = ForecastModel::new(config(8, 4, 2), &mut store, &mut RngState::new(6)).unwrap();
    let mut rng = RngState::new(7);
    let x = Tensor::from_fn(&[2, 8, 2], |_| rng.normal());
    let target = Tensor::from_fn(&[2, 4, 2], |_| rng.normal());
    let report = grad_check_model(&store, &[x], Mode::Train, 8, 1e-5, Probe::Coordinates, |ctx, inputs| {
        let y = model.clone().forward(ctx, inputs[0])?;
        let t = ctx.g.constant(target.clone());
        Ok(ctx.g.mse(y, t)?)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

fn write_csv(contents: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    f
}

#[test]
fn ingest_small_csv() {
    let f = write_csv("date,a,b\n2020-01-01,1.5,2\n2020-01-02,-3,4e1\n2020-01-03,0,0.25\n");
    let s = ingest_csv(f.path(), Some("date"), &["b", "a"]).unwrap();
    assert_eq!(
        s.values,
        Tensor::new(&[3, 2], vec![2.0, 1.5, 40.0, -3.0, 0.25, 0.0]).unwrap()
    );
    assert_eq!(s.timestamps[2], "2020-01-03");
    assert!(s.warnings.is_empty());
}

#[test]
fn blank_cell_names_its_row() {
    let f = write_csv("t,a\n0,1.0\n1,\n2,3.0\n");
    match ingest_csv(f.path(), Some("t"), &["a"]) {
        Err(CoreError::MissingValues { rows }) => assert_eq!(rows, vec![2]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn bad_number_reports_position() {
    let f = write_csv("t,a,b\n0,1.0,2\n1,x,3\n");
    match ingest_csv(f.path(), Some("t"), &["a", "b"]) {
        Err(CoreError::Parse { line, column, .. }) => assert_eq!((line, column), (3, 2)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn decreasing_timestamps_warn() {
    let f = write_csv("t,a\n1,1\n3,2\n2,3\n");
    let s = ingest_csv(f.path(), Some("t"), &["a"]).unwrap();
    assert_eq!(s.warnings.len(), 1);
    assert!(s.warnings[0].contains("row 3"));
}

#[test]
fn window_counts_match_arithmetic() {
    for &(total, n, h) in &[(100, 24, 12), (1000, 96, 24), (500, 36, 60), (10, 2, 1)] {
        let s = split_windows(total, n, h).unwrap();
        let bounds = [
            (0, total * 7 / 10),
            (total * 7 / 10, total * 8 / 10),
            (total * 8 / 10, total),
        ];
        for (seg, (lo, hi)) in [&s.train, &s.val, &s.test].into_iter().zip(bounds) {
            let want = (hi - lo + 1).saturating_sub(n + h);
            assert_eq!(seg.len(), want, "T={total} n={n} h={h}");
            assert!(seg.iter().all(|&st| st >= lo && st + n + h <= hi));
        }
    }
    let series = Tensor::from_fn(&[20, 2], |f| f as f64);
    let (x, y) = gather_windows(&series, &[0, 5], 4, 2).unwrap();
    assert_eq!(x.at(&[1, 0, 1]), series.at(&[5, 1]));
    assert_eq!(y.at(&[1, 1, 0]), series.at(&[10, 0]));
}

#[test]
fn metrics_match_loop() {
    let mut rng = RngState::new(9);
    let p = Tensor::from_fn(&[4, 3, 2], |_| rng.normal());
    let t = Tensor::from_fn(&[4, 3, 2], |_| rng.normal());
    let (mut se, mut ae) = (0.0, 0.0);
    for i in 0..24 {
        let e = p.data()[i] - t.data()[i];
        se += e * e;
        ae += e.abs();
    }
    let m = evaluate(&p, &t).unwrap();
    assert!((m.mse - se / 24.0).abs() < 1e-12 && (m.mae - ae / 24.0).abs() < 1e-12);
    assert!(evaluate(&p, &Tensor::zeros(&[4, 3])).is_err());
}

#[test]
fn predictions_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.csv");
    let pred = Tensor::new(&[2, 2], vec![1.0, -0.5, 2.0, 3.0]).unwrap();
    write_predictions(&path, 10, &pred, &["a".into(), "b".into()]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,a,b");
    assert!(lines[1].starts_with("10,"));
    assert_eq!(lines.len(), 3);
}
