//! Sequence classifier built from encoder blocks.

use s3attn_core::attention::{EncoderBlock, LayerNormIds, MixerKind, SkeletonConfig};
use s3attn_core::params::uniform_init;
use s3attn_core::smoother::SmootherConfig;
use s3attn_core::{Ctx, ParamId, ParamStore};
use s3attn_numerics::{RngState, Tensor, Var};

use crate::config::{ExperimentConfig, ModelKind};
use crate::error::Result;

/// Architecture of a [`SequenceModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub d_in: usize,
    pub outputs: usize,
    /// Predict at these positions instead of pooling over the sequence.
    pub positions: Option<Vec<usize>>,
    pub layers: usize,
    pub ffn: bool,
    pub dropout_embed: f64,
    pub block: MixerKind,
}

impl ModelSpec {
    pub fn from_config(cfg: &ExperimentConfig, d_in: usize, outputs: usize, positions: Option<Vec<usize>>) -> Self {
        let block = match cfg.model {
            ModelKind::S3 => {
                let mut smoother = SmootherConfig::new(cfg.n, cfg.d, cfg.fold, cfg.dropout_smoother);
                smoother.fourier_conv = cfg.fourier_conv;
                smoother.conv_stem = cfg.conv_stem;
                let mut attention = SkeletonConfig::new(cfg.n, cfg.d, cfg.heads, cfg.s1, cfg.s2, cfg.dropout_attn);
                attention.combine_scale = cfg.combine_scale;
                attention.seq_branch = cfg.seq_branch;
                attention.feat_branch = cfg.feat_branch;
                MixerKind::Skeleton { smoother, attention }
            }
            ModelKind::Vanilla => MixerKind::Vanilla {
                d: cfg.d,
                heads: cfg.heads,
                dropout_p: cfg.dropout_attn,
            },
        };
        Self {
            d_in,
            outputs,
            positions,
            layers: cfg.layers,
            ffn: cfg.ffn,
            dropout_embed: cfg.dropout_embed,
            block,
        }
    }

    fn dims(&self) -> (usize, usize) {
        match &self.block {
            MixerKind::Skeleton { attention, .. } => (attention.n, attention.d),
            // vanilla blocks accept any length; the positional table fixes it
            MixerKind::Vanilla { d, .. } => (0, *d),
        }
    }
}

/// Linear token embedding plus learned positions, a stack of encoder
/// blocks, a final layer norm and a linear head applied to the mean token
/// (or to selected positions for sequence targets).
#[derive(Debug, Clone)]
pub struct SequenceModel {
    pub spec: ModelSpec,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub positional: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub final_ln: LayerNormIds,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl SequenceModel {
    pub fn new(spec: ModelSpec, n: usize, store: &mut ParamStore, rng: &mut RngState) -> Result<Self> {
        let (spec_n, d) = spec.dims();
        if spec_n != 0 && spec_n != n {
            return Err(crate::error::HarnessError::Config(format!(
                "model built for length {spec_n} but task length is {n}"
            )));
        }
        let b_in = 1.0 / (spec.d_in as f64).sqrt();
        let embed_w = store.add("embed.w", uniform_init(&[spec.d_in, d], b_in, rng));
        let embed_b = store.add("embed.b", uniform_init(&[d], b_in, rng));
        let positional = store.add("embed.pos", Tensor::from_fn(&[n, d], |_| 0.02 * rng.normal()));
        let blocks = (0..spec.layers)
            .map(|i| EncoderBlock::new(spec.block, spec.ffn, store, &format!("block{i}"), rng))
            .collect::<Result<_, _>>()?;
        let final_ln = LayerNormIds::new(store, "final_ln", d);
        let b_out = 1.0 / (d as f64).sqrt();
        let head_w = store.add("head.w", uniform_init(&[d, spec.outputs], b_out, rng));
        let head_b = store.add("head.b", uniform_init(&[spec.outputs], b_out, rng));
        Ok(Self {
            spec,
            embed_w,
            embed_b,
            positional,
            blocks,
            final_ln,
            head_w,
            head_b,
        })
    }

    /// Logits `[B, outputs]`, or `[B·positions, outputs]` row-major by
    /// sample then position.
    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let b = ctx.g.shape(x)[0];
        let h = ctx.g.matmul(x, ctx.p(self.embed_w))?;
        let h = ctx.g.add(h, ctx.p(self.embed_b))?;
        let h = ctx.g.add(h, ctx.p(self.positional))?;
        let mut h = ctx.g.dropout(h, self.spec.dropout_embed, ctx.rng, ctx.mode)?;
        for block in &mut self.blocks {
            h = block.forward(ctx, h)?;
        }
        let h = self.final_ln.apply(ctx, h)?;
        let d = ctx.g.shape(h)[2];
        let (features, rows) = match &self.spec.positions {
            Some(pos) => (ctx.g.gather(h, 1, pos)?, b * pos.len()),
            None => (ctx.g.mean_axis(h, 1)?, b),
        };
        let features = ctx.g.reshape(features, &[rows, d])?;
        let logits = ctx.g.matmul(features, ctx.p(self.head_w))?;
        Ok(ctx.g.add(logits, ctx.p(self.head_b))?)
    }
}
