use s3attn_core::attention::*;
use s3attn_core::params::{grad_check_model, Ctx, ParamStore};
use s3attn_core::smoother::SmootherConfig;
use s3attn_numerics::kernels::{self, Mode, LAYER_NORM_EPS};
use s3attn_numerics::{Graph, Probe, RngState, Tensor};

type Mat = Vec<Vec<f64>>;

fn gaussian(shape: &[usize], rng: &mut RngState) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn slice(x: &Tensor, b: usize, h: usize) -> Mat {
    let (n, dh) = (x.shape()[2], x.shape()[3]);
    (0..n).map(|i| (0..dh).map(|j| x.at(&[b, h, i, j])).collect()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..p).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

fn tr(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn scaled(a: &Mat, s: f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

/// `s × n` selection matrix with a one at `(i, idx[i])`.
fn selection(idx: &[usize], n: usize) -> Mat {
    idx.iter()
        .map(|&k| (0..n).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn max_diff(a: &Mat, x: &Tensor, b: usize, h: usize) -> f64 {
    let got = slice(x, b, h);
    a.iter()
        .flatten()
        .zip(got.iter().flatten())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

fn qkv(shape: &[usize], rng: &mut RngState) -> (Tensor, Tensor, Tensor) {
    (gaussian(shape, rng), gaussian(shape, rng), gaussian(shape, rng))
}

#[test]
fn sequence_landmarks_match_dense_projection() {
    let mut rng = RngState::new(1);
    let (b, h, n, dh, s1) = (1, 2, 8, 4, 3);
    for _ in 0..10 {
        let (q, k, v) = qkv(&[b, h, n, dh], &mut rng);
        let lm = s3attn_core::sketch::uniform_sample_indices(n, s1, &mut rng).unwrap();
        let out = sequence_landmark_attention(&q, &k, &v, &lm).unwrap();
        let p1 = selection(&lm, n);
        for hi in 0..h {
            let (qm, km, vm) = (slice(&q, 0, hi), slice(&k, 0, hi), slice(&v, 0, hi));
            // softmax(Q Kᵀ P₁ᵀ / √d_h) P₁ V
            let scores = scaled(&mm(&mm(&qm, &tr(&km)), &tr(&p1)), 1.0 / (dh as f64).sqrt());
            let want = mm(&softmax_rows(&scores), &mm(&p1, &vm));
            assert!(max_diff(&want, &out, 0, hi) < 1e-12);
        }
    }
}

#[test]
fn feature_landmarks_match_dense_projection() {
    let mut rng = RngState::new(2);
    let (n, dh, s2) = (6, 4, 2);
    for _ in 0..10 {
        let (q, k, v) = qkv(&[1, 1, n, dh], &mut rng);
        let lm = s3attn_core::sketch::uniform_sample_indices(dh, s2, &mut rng).unwrap();
        let out = feature_landmark_attention(&q, &k, &v, &lm).unwrap();
        let p2 = tr(&selection(&lm, dh));
        let (qm, km, vm) = (slice(&q, 0, 0), slice(&k, 0, 0), slice(&v, 0, 0));
        // V P₂ softmax(P₂ᵀ Kᵀ Q / √n), normalized over the sampled axis
        let scores = scaled(&mm(&mm(&tr(&p2), &tr(&km)), &qm), 1.0 / (n as f64).sqrt());
        let weights = tr(&softmax_rows(&tr(&scores)));
        let want = mm(&mm(&vm, &p2), &weights);
        assert!(max_diff(&want, &out, 0, 0) < 1e-12);
    }
}

#[test]
fn vanilla_matches_loop_oracle() {
    let mut rng = RngState::new(3);
    let (b, h, n, dh) = (2, 2, 5, 3);
    let (q, k, v) = qkv(&[b, h, n, dh], &mut rng);
    let out = vanilla_attention(&q, &k, &v).unwrap();
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..dh)
                            .map(|t| q.at(&[bi, hi, i, t]) * k.at(&[bi, hi, j, t]))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for c in 0..dh {
                    let want: f64 = (0..n).map(|j| (scores[j] - m).exp() / z * v.at(&[bi, hi, j, c])).sum();
                    assert!((out.at(&[bi, hi, i, c]) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn all_sequence_landmarks_equal_vanilla() {
    let mut rng = RngState::new(4);
    let (q, k, v) = qkv(&[2, 3, 9, 4], &mut rng);
    let all: Vec<usize> = (0..9).collect();
    let a = sequence_landmark_attention(&q, &k, &v, &all).unwrap();
    assert!(a.max_abs_diff(&vanilla_attention(&q, &k, &v).unwrap()) < 1e-12);
}

#[test]
fn attention_weights_are_stochastic() {
    let mut rng = RngState::new(5);
    let (n, dh) = (7, 6);
    let (q, k, _) = qkv(&[1, 2, n, dh], &mut rng);
    // Values constant along features: every output entry is that row's
    // constant times the weight sum.
    let row_const = Tensor::from_fn(&[1, 2, n, dh], |f| ((f / dh) % n) as f64 + 1.0);
    let seq = sequence_landmark_attention(&q, &k, &Tensor::ones(&[1, 2, n, dh]), &[0, 3, 5]).unwrap();
    assert!(seq.max_abs_diff(&Tensor::ones(&[1, 2, n, dh])) < 1e-12);
    let feat = feature_landmark_attention(&q, &k, &row_const, &[1, 4]).unwrap();
    assert!(feat.max_abs_diff(&row_const) < 1e-12);
}

#[test]
fn sharp_match_selects_value() {
    let n = 4;
    let dh = 4;
    let k = Tensor::from_fn(&[1, 1, n, dh], |f| if f / dh == f % dh { 1.0 } else { 0.0 });
    let q = Tensor::from_fn(&[1, 1, 1, dh], |f| if f == 2 { 200.0 } else { 0.0 });
    let v = Tensor::from_fn(&[1, 1, n, dh], |f| f as f64);
    let q = Tensor::from_fn(&[1, 1, n, dh], |f| q.data()[f % dh]);
    let out = vanilla_attention(&q, &k, &v).unwrap();
    for c in 0..dh {
        assert!((out.at(&[0, 0, 0, c]) - v.at(&[0, 0, 2, c])).abs() < 1e-12);
    }
}

#[test]
fn non_landmark_positions_do_not_matter() {
    let mut rng = RngState::new(6);
    let n = 10;
    let (q, k, v) = qkv(&[1, 1, n, 3], &mut rng);
    let lm = [2, 5, 7];
    // swap positions 0 and 9, both outside the landmark set
    let swap = |x: &Tensor| {
        Tensor::from_fn(x.shape(), |f| {
            let (t, c) = (f / 3, f % 3);
            let src = match t {
                0 => 9,
                9 => 0,
                other => other,
            };
            x.data()[src * 3 + c]
        })
    };
    let a = sequence_landmark_attention(&q, &k, &v, &lm).unwrap();
    let b = sequence_landmark_attention(&q, &swap(&k), &swap(&v), &lm).unwrap();
    assert_eq!(a, b);
}

fn ctx_run<T>(store: &ParamStore, mode: Mode, seed: u64, f: impl FnOnce(&mut Ctx) -> T) -> T {
    let mut g = Graph::new();
    let mut rng = RngState::new(seed);
    let mut ctx = Ctx::new(&mut g, store, mode, &mut rng);
    f(&mut ctx)
}

#[test]
fn combine_of_identical_branches_is_one_layer_norm() {
    let mut rng = RngState::new(7);
    let mut store = ParamStore::new();
    let ln1 = LayerNormIds::new(&mut store, "ln1", 6);
    let ln2 = LayerNormIds::new(&mut store, "ln2", 6);
    let h = gaussian(&[2, 2, 5, 3], &mut rng);
    let (combined, single) = ctx_run(&store, Mode::Infer, 0, |ctx| {
        let hv = ctx.g.constant(h.clone());
        let c = combine_attention_var(ctx, hv, hv, &ln1, &ln2, 0.5).unwrap();
        let flat = combine_heads_var(ctx.g, hv).unwrap();
        let s = ln1.apply(ctx, flat).unwrap();
        (ctx.g.value(c).clone(), ctx.g.value(s).clone())
    });
    assert!(combined.max_abs_diff(&single) < 1e-15);

    // Normalization contract: zero mean, variance σ²/(σ² + eps) per row.
    let flat = combine_heads(&h).unwrap();
    for row in 0..10 {
        let x = &flat.data()[row * 6..(row + 1) * 6];
        let y = &single.data()[row * 6..(row + 1) * 6];
        let raw_var = x.iter().map(|v| (v - x.iter().sum::<f64>() / 6.0).powi(2)).sum::<f64>() / 6.0;
        let mean = y.iter().sum::<f64>() / 6.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - raw_var / (raw_var + LAYER_NORM_EPS)).abs() < 1e-8);
    }
}

fn skeleton(n: usize, d: usize, heads: usize, s1: usize, s2: usize, seed: u64) -> (SkeletonAttention, ParamStore) {
    let mut store = ParamStore::new();
    let attn = SkeletonAttention::new(
        SkeletonConfig::new(n, d, heads, s1, s2, 0.0),
        &mut store,
        "attn",
        &mut RngState::new(seed),
    )
    .unwrap();
    (attn, store)
}

#[test]
fn full_sampling_block_composes_branches() {
    let (n, d, heads) = (6, 8, 2);
    let (attn, store) = skeleton(n, d, heads, n, d / heads, 8);
    assert_eq!(attn.seq_landmarks, (0..n).collect::<Vec<_>>());
    assert_eq!(attn.feat_landmarks, (0..d / heads).collect::<Vec<_>>());
    let x = gaussian(&[2, n, d], &mut RngState::new(9));
    let got = ctx_run(&store, Mode::Infer, 0, |ctx| {
        let xv = ctx.g.constant(x.clone());
        let out = attn.forward(ctx, xv).unwrap();
        ctx.g.value(out).clone()
    });

    let proj = |id| split_heads(&kernels_matmul(&x, store.get(id)), heads).unwrap();
    let (q, k, v) = (proj(attn.qkv.wq), proj(attn.qkv.wk), proj(attn.qkv.wv));
    let all_dh: Vec<usize> = (0..d / heads).collect();
    let h1 = combine_heads(&vanilla_attention(&q, &k, &v).unwrap()).unwrap();
    let h2 = combine_heads(&feature_landmark_attention(&q, &k, &v, &all_dh).unwrap()).unwrap();
    let ln = |t: &Tensor, ids: LayerNormIds| {
        kernels::layer_norm(t, store.get(ids.gain), store.get(ids.bias), LAYER_NORM_EPS).unwrap()
    };
    let want = ln(&h1, attn.ln1).add(&ln(&h2, attn.ln2)).unwrap().scale(0.5);
    assert!(got.max_abs_diff(&want) < 1e-12);
}

fn kernels_matmul(x: &Tensor, w: &Tensor) -> Tensor {
    s3attn_numerics::matmul(x, w).unwrap()
}

fn weighted_sum(ctx: &mut Ctx, y: s3attn_numerics::Var, seed: u64) -> s3attn_numerics::Var {
    let shape = ctx.g.shape(y).to_vec();
    let w = ctx.g.constant(gaussian(&shape, &mut RngState::new(seed)));
    let p = ctx.g.mul(y, w).unwrap();
    ctx.g.sum(p)
}

#[test]
fn skeleton_attention_gradients() {
    let (n, d) = (6, 4);
    let mut store = ParamStore::new();
    let mut cfg = SkeletonConfig::new(n, d, 2, 3, 1, 0.3);
    cfg.combine_scale = 0.5;
    let attn = SkeletonAttention::new(cfg, &mut store, "attn", &mut RngState::new(10)).unwrap();
    let x = gaussian(&[2, n, d], &mut RngState::new(11));
    let report = grad_check_model(&store, &[x], Mode::Train, 5, 1e-5, Probe::Coordinates, |ctx, inputs| {
        let y = attn.forward(ctx, inputs[0])?;
        Ok(weighted_sum(ctx, y, 12))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn skeleton_kind(n: usize, d: usize, fold: usize, dropout: f64) -> MixerKind {
    MixerKind::Skeleton {
        smoother: SmootherConfig::new(n, d, fold, dropout),
        attention: SkeletonConfig::new(n, d, 2, 3, 2, dropout),
    }
}

#[test]
fn stacked_encoder_gradients() {
    let (n, d) = (6, 4);
    let mut store = ParamStore::new();
    let mut rng = RngState::new(13);
    let blocks: Vec<EncoderBlock> = (0..2)
        .map(|i| {
            EncoderBlock::new(
                skeleton_kind(n, d, 2, 0.1),
                i == 1,
                &mut store,
                &format!("b{i}"),
                &mut rng,
            )
            .unwrap()
        })
        .collect();
    let x = gaussian(&[2, n, d], &mut RngState::new(14));
    let report = grad_check_model(&store, &[x], Mode::Train, 6, 1e-5, Probe::Coordinates, |ctx, inputs| {
        let mut h = inputs[0];
        for block in &blocks {
            h = block.clone().forward(ctx, h)?;
        }
        Ok(weighted_sum(ctx, h, 15))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn tiny_weights_leave_residual_path() {
    let (n, d) = (8, 8);
    let mut store = ParamStore::new();
    let mut block = EncoderBlock::new(
        skeleton_kind(n, d, 4, 0.0),
        false,
        &mut store,
        "b",
        &mut RngState::new(16),
    )
    .unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id).scale(1e-6);
        *store.get_mut(id) = t;
    }
    let x = gaussian(&[2, n, d], &mut RngState::new(17));
    let out = ctx_run(&store, Mode::Train, 0, |ctx| {
        let xv = ctx.g.constant(x.clone());
        let y = block.forward(ctx, xv).unwrap();
        ctx.g.value(y).clone()
    });
    assert!(out.max_abs_diff(&x) < 1e-4 * x.max_abs(), "{}", out.max_abs_diff(&x));
}

#[test]
fn shapes_and_finiteness() {
    let (n, d) = (8, 8);
    let mut store = ParamStore::new();
    let mut rng = RngState::new(18);
    let mut blocks: Vec<EncoderBlock> = (0..3)
        .map(|i| {
            EncoderBlock::new(
                skeleton_kind(n, d, 4, 0.1),
                false,
                &mut store,
                &format!("b{i}"),
                &mut rng,
            )
            .unwrap()
        })
        .collect();
    let mut vanilla = EncoderBlock::new(
        MixerKind::Vanilla {
            d,
            heads: 2,
            dropout_p: 0.1,
        },
        true,
        &mut store,
        "v",
        &mut rng,
    )
    .unwrap();
    for trial in 0..1000 {
        let mut data_rng = RngState::new(1000 + trial);
        let x = Tensor::from_fn(&[1, n, d], |_| data_rng.uniform_range(-1e3, 1e3));
        let mode = if trial % 2 == 0 { Mode::Train } else { Mode::Infer };
        let out = ctx_run(&store, mode, trial, |ctx| {
            let mut h = ctx.g.constant(x.clone());
            for b in &mut blocks {
                h = b.forward(ctx, h).unwrap();
            }
            h = vanilla.forward(ctx, h).unwrap();
            ctx.g.value(h).clone()
        });
        assert_eq!(out.shape(), &[1, n, d]);
        assert!(out.data().iter().all(|v| v.is_finite()), "trial {trial}");
    }
}

#[test]
fn single_branch_variants_skip_averaging() {
    let (n, d) = (6, 4);
    let x = gaussian(&[1, n, d], &mut RngState::new(19));
    for (seq, feat) in [(true, false), (false, true)] {
        let mut store = ParamStore::new();
        let mut cfg = SkeletonConfig::new(n, d, 2, 3, 1, 0.0);
        cfg.seq_branch = seq;
        cfg.feat_branch = feat;
        let attn = SkeletonAttention::new(cfg, &mut store, "a", &mut RngState::new(20)).unwrap();
        let out = ctx_run(&store, Mode::Infer, 0, |ctx| {
            let xv = ctx.g.constant(x.clone());
            let y = attn.forward(ctx, xv).unwrap();
            ctx.g.value(y).clone()
        });
        // A lone layer-normed branch keeps unit-scale rows.
        for row in 0..n {
            let r = &out.data()[row * d..(row + 1) * d];
            let var = r.iter().map(|v| v * v).sum::<f64>() / d as f64;
            assert!(var > 0.9, "{seq} {feat}: {var}");
        }
        assert_eq!(store.len(), 7);
    }
}
