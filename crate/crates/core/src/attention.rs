//! Landmark attention over sampled sequence positions and sampled feature
//! dimensions, their layer-norm combination, a dense baseline, and the
//! encoder block.
//!
//! `sequence_landmark_attention` mixes token rows through `s₁` sampled
//! positions (the reference listing calls this "row attention");
//! `feature_landmark_attention` mixes feature columns through `s₂`
//! sampled head dimensions ("column attention" in the listing).

use s3attn_numerics::kernels::{Mode, LAYER_NORM_EPS};
use s3attn_numerics::{Graph, RngState, Tensor, Var};

use crate::error::{param_err, Result};
use crate::params::{uniform_init, Ctx, ParamId, ParamStore};
use crate::sketch::uniform_sample_indices;
use crate::smoother::{Smoother, SmootherConfig};

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(param_err(
            "split_heads",
            format!("model dimension {d} is not divisible by {heads} heads"),
        ));
    }
    Ok(d / heads)
}

fn dims3(g: &Graph, x: Var, op: &'static str) -> Result<[usize; 3]> {
    match *g.shape(x) {
        [b, n, d] => Ok([b, n, d]),
        ref s => Err(param_err(op, format!("expected [B, n, d], got {s:?}"))),
    }
}

/// `[B, n, d] → [B, h, n, d/h]`; feature `j` lands in head `j / d_h` at
/// position `j mod d_h`.
pub fn split_heads_var(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let [b, n, d] = dims3(g, x, "split_heads")?;
    let dh = check_heads(d, heads)?;
    let r = g.reshape(x, &[b, n, heads, dh])?;
    Ok(g.permute(r, &[0, 2, 1, 3])?)
}

/// Inverse of [`split_heads_var`].
pub fn combine_heads_var(g: &mut Graph, x: Var) -> Result<Var> {
    let [b, h, n, dh] = match *g.shape(x) {
        [b, h, n, dh] => [b, h, n, dh],
        ref s => {
            return Err(param_err(
                "combine_heads",
                format!("expected [B, h, n, d_h], got {s:?}"),
            ))
        }
    };
    let p = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(p, &[b, n, h * dh])?)
}

fn check_qkv(g: &Graph, q: Var, k: Var, v: Var, op: &'static str) -> Result<[usize; 4]> {
    let s = g.shape(q).to_vec();
    if s.len() != 4 || g.shape(k) != s.as_slice() || g.shape(v) != s.as_slice() {
        return Err(param_err(
            op,
            format!(
                "q, k, v must share a [B, h, n, d_h] shape, got {:?}, {:?}, {:?}",
                s,
                g.shape(k),
                g.shape(v)
            ),
        ));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

fn check_landmarks(landmarks: &[usize], bound: usize, op: &'static str) -> Result<()> {
    if landmarks.is_empty() || landmarks.iter().any(|&i| i >= bound) {
        return Err(param_err(op, format!("landmarks must be non-empty and below {bound}")));
    }
    Ok(())
}

/// `dropout(softmax(q·K₁ᵀ/√d_h))·V₁` with `K₁, V₁` the landmark rows of
/// `k, v`.
#[allow(clippy::too_many_arguments)]
pub fn sequence_landmark_attention_var(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    landmarks: &[usize],
    dropout_p: f64,
    rng: &mut RngState,
    mode: Mode,
) -> Result<Var> {
    let [_, _, n, dh] = check_qkv(g, q, k, v, "sequence_landmark_attention")?;
    check_landmarks(landmarks, n, "sequence_landmark_attention")?;
    let k1 = g.gather(k, 2, landmarks)?;
    let v1 = g.gather(v, 2, landmarks)?;
    Ok(g.attention(q, k1, v1, 1.0 / (dh as f64).sqrt(), dropout_p, rng, mode)?)
}

/// `V₂·dropout(softmax(qᵀ·K₂/√n)ᵀ)` with `K₂, V₂` the landmark feature
/// columns of `k, v`; softmax runs over the landmark axis before the
/// transpose.
#[allow(clippy::too_many_arguments)]
pub fn feature_landmark_attention_var(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    landmarks: &[usize],
    dropout_p: f64,
    rng: &mut RngState,
    mode: Mode,
) -> Result<Var> {
    let [_, _, n, dh] = check_qkv(g, q, k, v, "feature_landmark_attention")?;
    check_landmarks(landmarks, dh, "feature_landmark_attention")?;
    let k2 = g.gather(k, 3, landmarks)?;
    let v2 = g.gather(v, 3, landmarks)?;
    let dots = g.matmul_t(q, k2, true, false)?;
    let dots = g.scale(dots, 1.0 / (n as f64).sqrt());
    let weights = g.softmax(dots)?;
    let weights = g.transpose_last(weights)?;
    let weights = g.dropout(weights, dropout_p, rng, mode)?;
    Ok(g.matmul(v2, weights)?)
}

/// Dense `softmax(q·kᵀ/√d_h)·v` per head.
pub fn vanilla_attention_var(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    dropout_p: f64,
    rng: &mut RngState,
    mode: Mode,
) -> Result<Var> {
    let [_, _, _, dh] = check_qkv(g, q, k, v, "vanilla_attention")?;
    Ok(g.attention(q, k, v, 1.0 / (dh as f64).sqrt(), dropout_p, rng, mode)?)
}

/// Layer-norm parameters over the model dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormIds {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::ones(&[d])),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(ctx
            .g
            .layer_norm(x, ctx.p(self.gain), ctx.p(self.bias), LAYER_NORM_EPS)?)
    }
}

/// `(LN₁(combine(h1)) + LN₂(combine(h2)))·scale`.
pub fn combine_attention_var(
    ctx: &mut Ctx,
    h1: Var,
    h2: Var,
    ln1: &LayerNormIds,
    ln2: &LayerNormIds,
    scale: f64,
) -> Result<Var> {
    let a = combine_heads_var(ctx.g, h1)?;
    let a = ln1.apply(ctx, a)?;
    let b = combine_heads_var(ctx.g, h2)?;
    let b = ln2.apply(ctx, b)?;
    let sum = ctx.g.add(a, b)?;
    Ok(ctx.g.scale(sum, scale))
}

fn eval_constant(f: impl FnOnce(&mut Graph, &mut RngState) -> Result<Var>, g: &mut Graph) -> Result<Tensor> {
    let mut rng = RngState::new(0);
    let out = f(g, &mut rng)?;
    Ok(g.value(out).clone())
}

/// Tensor form of [`split_heads_var`].
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    eval_constant(|g, _| split_heads_var(g, xv, heads), &mut g)
}

/// Tensor form of [`combine_heads_var`].
pub fn combine_heads(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    eval_constant(|g, _| combine_heads_var(g, xv), &mut g)
}

fn qkv_constants(g: &mut Graph, q: &Tensor, k: &Tensor, v: &Tensor) -> (Var, Var, Var) {
    (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()))
}

/// Inference-mode tensor form of [`sequence_landmark_attention_var`].
pub fn sequence_landmark_attention(q: &Tensor, k: &Tensor, v: &Tensor, landmarks: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = qkv_constants(&mut g, q, k, v);
    eval_constant(
        |g, rng| sequence_landmark_attention_var(g, q, k, v, landmarks, 0.0, rng, Mode::Infer),
        &mut g,
    )
}

/// Inference-mode tensor form of [`feature_landmark_attention_var`].
pub fn feature_landmark_attention(q: &Tensor, k: &Tensor, v: &Tensor, landmarks: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = qkv_constants(&mut g, q, k, v);
    eval_constant(
        |g, rng| feature_landmark_attention_var(g, q, k, v, landmarks, 0.0, rng, Mode::Infer),
        &mut g,
    )
}

/// Inference-mode tensor form of [`vanilla_attention_var`].
pub fn vanilla_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = qkv_constants(&mut g, q, k, v);
    eval_constant(
        |g, rng| vanilla_attention_var(g, q, k, v, 0.0, rng, Mode::Infer),
        &mut g,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkeletonConfig {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    /// Sampled sequence positions; all positions when larger than `n`.
    pub s1: usize,
    /// Sampled head dimensions; all dimensions when larger than `d/heads`.
    pub s2: usize,
    pub dropout_p: f64,
    /// Weight of each layer-normed branch in the sum.
    pub combine_scale: f64,
    pub seq_branch: bool,
    pub feat_branch: bool,
    /// Draw fresh landmarks on every training forward pass.
    pub resample_landmarks: bool,
}

impl SkeletonConfig {
    pub fn new(n: usize, d: usize, heads: usize, s1: usize, s2: usize, dropout_p: f64) -> Self {
        Self {
            n,
            d,
            heads,
            s1,
            s2,
            dropout_p,
            combine_scale: 0.5,
            seq_branch: true,
            feat_branch: true,
            resample_landmarks: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.s1 == 0 || self.s2 == 0 {
            return Err(param_err("skeleton_attention", "n, s1 and s2 must be positive"));
        }
        check_heads(self.d, self.heads)?;
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(param_err(
                "skeleton_attention",
                format!("dropout {} outside [0, 1)", self.dropout_p),
            ));
        }
        if !self.seq_branch && !self.feat_branch {
            return Err(param_err(
                "skeleton_attention",
                "at least one attention branch must be kept",
            ));
        }
        Ok(())
    }
}

/// Query, key and value projections without bias, initialized uniform on
/// `±1/√d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QkvIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl QkvIds {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            wq: store.add(format!("{prefix}.wq"), uniform_init(&[d, d], bound, rng)),
            wk: store.add(format!("{prefix}.wk"), uniform_init(&[d, d], bound, rng)),
            wv: store.add(format!("{prefix}.wv"), uniform_init(&[d, d], bound, rng)),
        }
    }

    /// Projected and head-split `(q, k, v)`.
    pub fn project(&self, ctx: &mut Ctx, x: Var, heads: usize) -> Result<(Var, Var, Var)> {
        let mut out = [x; 3];
        for (slot, id) in out.iter_mut().zip([self.wq, self.wk, self.wv]) {
            let w = ctx.p(id);
            let y = ctx.g.matmul(x, w)?;
            *slot = split_heads_var(ctx.g, y, heads)?;
        }
        Ok((out[0], out[1], out[2]))
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub v_hat: Var,
    pub seq_landmarks: Vec<usize>,
    pub feat_landmarks: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SkeletonAttention {
    pub config: SkeletonConfig,
    pub qkv: QkvIds,
    pub ln1: LayerNormIds,
    pub ln2: LayerNormIds,
    pub seq_landmarks: Vec<usize>,
    pub feat_landmarks: Vec<usize>,
}

impl SkeletonAttention {
    /// Registers parameters and samples both landmark sets once.
    pub fn new(config: SkeletonConfig, store: &mut ParamStore, prefix: &str, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let qkv = QkvIds::new(store, prefix, config.d, rng);
        let ln1 = LayerNormIds::new(store, &format!("{prefix}.ln1"), config.d);
        let ln2 = LayerNormIds::new(store, &format!("{prefix}.ln2"), config.d);
        let seq_landmarks = uniform_sample_indices(config.n, config.s1, rng)?;
        let feat_landmarks = uniform_sample_indices(config.head_dim(), config.s2, rng)?;
        Ok(Self {
            config,
            qkv,
            ln1,
            ln2,
            seq_landmarks,
            feat_landmarks,
        })
    }

    pub fn forward_full(&self, ctx: &mut Ctx, x: Var) -> Result<AttentionOutput> {
        let cfg = &self.config;
        let [_, n, d] = dims3(ctx.g, x, "skeleton_attention")?;
        if n != cfg.n || d != cfg.d {
            return Err(param_err(
                "skeleton_attention",
                format!("expected [B, {}, {}], got {:?}", cfg.n, cfg.d, ctx.g.shape(x)),
            ));
        }
        let (seq_landmarks, feat_landmarks) = if cfg.resample_landmarks && ctx.mode == Mode::Train {
            (
                uniform_sample_indices(cfg.n, cfg.s1, ctx.rng)?,
                uniform_sample_indices(cfg.head_dim(), cfg.s2, ctx.rng)?,
            )
        } else {
            (self.seq_landmarks.clone(), self.feat_landmarks.clone())
        };
        let (q, k, v) = self.qkv.project(ctx, x, cfg.heads)?;
        let seq = if cfg.seq_branch {
            let h = sequence_landmark_attention_var(ctx.g, q, k, v, &seq_landmarks, cfg.dropout_p, ctx.rng, ctx.mode)?;
            let h = combine_heads_var(ctx.g, h)?;
            Some(self.ln1.apply(ctx, h)?)
        } else {
            None
        };
        let feat = if cfg.feat_branch {
            let h = feature_landmark_attention_var(ctx.g, q, k, v, &feat_landmarks, cfg.dropout_p, ctx.rng, ctx.mode)?;
            let h = combine_heads_var(ctx.g, h)?;
            Some(self.ln2.apply(ctx, h)?)
        } else {
            None
        };
        let v_hat = match (seq, feat) {
            (Some(a), Some(b)) => {
                let sum = ctx.g.add(a, b)?;
                ctx.g.scale(sum, cfg.combine_scale)
            }
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("validated at construction"),
        };
        Ok(AttentionOutput {
            v_hat,
            seq_landmarks,
            feat_landmarks,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_full(ctx, x)?.v_hat)
    }
}

/// Dense multi-head attention followed by a layer norm, the baseline.
#[derive(Debug, Clone)]
pub struct VanillaAttention {
    pub heads: usize,
    pub dropout_p: f64,
    pub qkv: QkvIds,
    pub ln: LayerNormIds,
}

impl VanillaAttention {
    pub fn new(
        d: usize,
        heads: usize,
        dropout_p: f64,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut RngState,
    ) -> Result<Self> {
        check_heads(d, heads)?;
        Ok(Self {
            heads,
            dropout_p,
            qkv: QkvIds::new(store, prefix, d, rng),
            ln: LayerNormIds::new(store, &format!("{prefix}.ln"), d),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        dims3(ctx.g, x, "vanilla_attention")?;
        let (q, k, v) = self.qkv.project(ctx, x, self.heads)?;
        let h = vanilla_attention_var(ctx.g, q, k, v, self.dropout_p, ctx.rng, ctx.mode)?;
        let h = combine_heads_var(ctx.g, h)?;
        self.ln.apply(ctx, h)
    }
}

/// Position-wise `W₂·relu(W₁·LN(x) + b₁) + b₂` with hidden width `4d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub ln: LayerNormIds,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new(d: usize, store: &mut ParamStore, prefix: &str, rng: &mut RngState) -> Self {
        let hidden = 4 * d;
        let b_in = 1.0 / (d as f64).sqrt();
        let b_out = 1.0 / (hidden as f64).sqrt();
        Self {
            ln: LayerNormIds::new(store, &format!("{prefix}.ln"), d),
            w1: store.add(format!("{prefix}.w1"), uniform_init(&[d, hidden], b_in, rng)),
            b1: store.add(format!("{prefix}.b1"), uniform_init(&[hidden], b_in, rng)),
            w2: store.add(format!("{prefix}.w2"), uniform_init(&[hidden, d], b_out, rng)),
            b2: store.add(format!("{prefix}.b2"), uniform_init(&[d], b_out, rng)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.ln.apply(ctx, x)?;
        let h = ctx.g.matmul(h, ctx.p(self.w1))?;
        let h = ctx.g.add(h, ctx.p(self.b1))?;
        let h = ctx.g.relu(h);
        let h = ctx.g.matmul(h, ctx.p(self.w2))?;
        Ok(ctx.g.add(h, ctx.p(self.b2))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixerKind {
    /// Smoother followed by skeleton attention.
    Skeleton {
        smoother: SmootherConfig,
        attention: SkeletonConfig,
    },
    /// Dense attention without a smoother.
    Vanilla { d: usize, heads: usize, dropout_p: f64 },
}

// One mixer per layer, so the size gap between variants is irrelevant.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Mixer {
    Skeleton {
        smoother: Smoother,
        attention: SkeletonAttention,
    },
    Vanilla(VanillaAttention),
}

/// `mixer(x) + x`, optionally followed by `+ ffn(·)`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub mixer: Mixer,
    pub ffn: Option<FeedForward>,
}

impl EncoderBlock {
    pub fn new(kind: MixerKind, ffn: bool, store: &mut ParamStore, prefix: &str, rng: &mut RngState) -> Result<Self> {
        let (mixer, d) = match kind {
            MixerKind::Skeleton { smoother, attention } => {
                if smoother.n != attention.n || smoother.d != attention.d {
                    return Err(param_err("encoder_block", "smoother and attention disagree on (n, d)"));
                }
                let smoother = Smoother::new(smoother, store, &format!("{prefix}.smoother"), rng)?;
                let attention = SkeletonAttention::new(attention, store, &format!("{prefix}.attn"), rng)?;
                let d = attention.config.d;
                (Mixer::Skeleton { smoother, attention }, d)
            }
            MixerKind::Vanilla { d, heads, dropout_p } => (
                Mixer::Vanilla(VanillaAttention::new(
                    d,
                    heads,
                    dropout_p,
                    store,
                    &format!("{prefix}.attn"),
                    rng,
                )?),
                d,
            ),
        };
        let ffn = ffn.then(|| FeedForward::new(d, store, &format!("{prefix}.ffn"), rng));
        Ok(Self { mixer, ffn })
    }

    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mixed = match &mut self.mixer {
            Mixer::Skeleton { smoother, attention } => {
                let s = smoother.forward(ctx, x)?;
                attention.forward(ctx, s)?
            }
            Mixer::Vanilla(attn) => attn.forward(ctx, x)?,
        };
        let h = ctx.g.add(mixed, x)?;
        match &self.ffn {
            Some(ffn) => {
                let f = ffn.forward(ctx, h)?;
                Ok(ctx.g.add(f, h)?)
            }
            None => Ok(h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_split_round_trip() {
        let x = Tensor::from_fn(&[2, 8, 6], |i| i as f64);
        let s = split_heads(&x, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2, 8, 3]);
        assert_eq!(s.at(&[1, 1, 5, 2]), x.at(&[1, 5, 5]));
        assert_eq!(combine_heads(&s).unwrap(), x);
        assert_eq!(split_heads(&x, 1).unwrap().data(), x.data());
        assert!(split_heads(&x, 4).is_err());
    }

    #[test]
    fn single_token_returns_value() {
        let q = Tensor::from_fn(&[1, 1, 1, 3], |i| i as f64 - 1.0);
        let v = Tensor::from_fn(&[1, 1, 1, 3], |i| 2.0 * i as f64 + 0.5);
        assert_eq!(sequence_landmark_attention(&q, &q, &v, &[0]).unwrap(), v);
        assert_eq!(vanilla_attention(&q, &q, &v).unwrap(), v);
    }

    #[test]
    fn single_feature_landmark_copies_column() {
        let mut rng = RngState::new(2);
        let q = Tensor::from_fn(&[1, 1, 5, 4], |_| rng.normal());
        let k = Tensor::from_fn(&[1, 1, 5, 4], |_| rng.normal());
        let v = Tensor::from_fn(&[1, 1, 5, 4], |_| rng.normal());
        let out = feature_landmark_attention(&q, &k, &v, &[2]).unwrap();
        for t in 0..5 {
            for j in 0..4 {
                assert!((out.at(&[0, 0, t, j]) - v.at(&[0, 0, t, 2])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn config_rejects_bad_shapes() {
        assert!(SkeletonConfig::new(8, 6, 4, 2, 2, 0.0).validate().is_err());
        let mut c = SkeletonConfig::new(8, 8, 2, 2, 2, 0.0);
        c.seq_branch = false;
        c.feat_branch = false;
        assert!(c.validate().is_err());
    }
}
