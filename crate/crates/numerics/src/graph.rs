//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation evaluates eagerly and records a node holding its value
//! and whatever its backward rule needs. Nodes only reference earlier nodes,
//! so insertion order is a topological order and [`Graph::backward`] is a
//! single reverse sweep. Gradients of intermediate nodes are released as
//! soon as they have been propagated; leaf gradients are kept.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{param_err, shape_err, Result};
use crate::fft::{irfft_1d, plan, rfft_1d};
use crate::kernels::{self, Mode, RunningStats};
use crate::linalg::{gemm, matmul_dims, matmul_t};
use crate::rng::RngState;
use crate::tensor::{axis_split, strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Sqrt,
    Square,
    Relu,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    AddScalar {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    SumAll {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    BatchNormInfer {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Dropout {
        x: Var,
        mask: Tensor,
    },
    SegmentMean {
        x: Var,
        fold: usize,
    },
    FourierConv {
        u: Var,
        l_re: Var,
        l_im: Var,
        /// rFFT of every segment-mean column, `[B, h, r]`.
        spec_re: Tensor,
        spec_im: Tensor,
    },
    FourierExtrapolate {
        x: Var,
        selected: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Tensor,
        mask: Option<Tensor>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Tape of evaluated operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize], i: usize| -> usize {
        let off = rank - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..rank)
        .map(|i| {
            let (x, y) = (pad(a, i), pad(b, i));
            match (x, y) {
                _ if x == y => Some(x),
                (1, _) => Some(y),
                (_, 1) => Some(x),
                _ => None,
            }
        })
        .collect()
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_flat, a_off, b_off)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..numel {
        f(flat, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `grad` (shaped `out`) down to `target` along broadcast axes.
fn reduce_to(grad: &[f64], out: &[usize], target: &[usize]) -> Tensor {
    if out == target {
        return Tensor::from_parts(target.to_vec(), grad.to_vec());
    }
    let st = broadcast_strides(target, out);
    let mut acc = Tensor::zeros(target);
    let data = acc.data_mut();
    for_each_broadcast(out, &st, &st, |flat, off, _| data[off] += grad[flat]);
    acc
}

/// Signed DFT frequency numerator of bin `k` (the `k` of `fftfreq·n`).
pub fn signed_bin(k: usize, n: usize) -> i64 {
    if k <= (n - 1) / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Full-FFT bin indices ordered by ascending `|fftfreq|` (stable, so ties
/// keep index order), truncated to `1 + 2·n_harm`.
pub fn select_harmonics(n: usize, n_harm: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by_key(|&k| signed_bin(k, n).unsigned_abs());
    idx.truncate((1 + 2 * n_harm).min(n));
    idx
}

/// `(cos, sin)` of `2π·num·t/n`, with `num·t` reduced mod `n` first.
fn bin_phase(num: i64, t: usize, n: usize) -> (f64, f64) {
    let r = (num * t as i64).rem_euclid(n as i64);
    let angle = 2.0 * PI * r as f64 / n as f64;
    (angle.cos(), angle.sin())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err("broadcast", &sa, &sb))?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![0.0; out.iter().product()];
            let (ba, bb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            for_each_broadcast(&out, &ba, &bb, |i, oa, ob| data[i] = f(va[oa], vb[ob]));
            data
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out, data), Op::Binary { kind, a, b }, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f = match kind {
            UnaryKind::Neg => |v: f64| -v,
            UnaryKind::Sqrt => f64::sqrt,
            UnaryKind::Square => |v: f64| v * v,
            UnaryKind::Relu => |v: f64| if v < 0.0 { 0.0 } else { v },
        };
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, s }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(value, Op::AddScalar { x }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` transposes the last two axes when flagged.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = matmul_t(self.value(a), self.value(b), ta, tb)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(param_err("transpose_last", "rank below 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| param_err("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(param_err("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let same =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat { xs: xs.to_vec(), axis },
            rg,
        ))
    }

    /// Selects `indices` along `axis` (indices may repeat).
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(param_err("gather", format!("axis {axis} for shape {shape:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(param_err("gather", format!("index {bad} out of range {}", shape[axis])));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * len + i) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Gather {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(param_err("sum_axis", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let base = (o * len + t) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| param_err("mean_axis", "axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank == 0 {
            return Err(param_err("softmax", "rank-0 input"));
        }
        let value = kernels::softmax(self.value(x), rank - 1)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Layer norm over the last axis with affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.shape(x).last().copied().unwrap_or(0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let stats = kernels::layer_norm_stats(self.value(x), eps);
        let mut y = stats.xhat.clone();
        {
            let (g, b) = (self.value(gain).data(), self.value(bias).data());
            for row in y.data_mut().chunks_mut(d) {
                for ((v, gg), bb) in row.iter_mut().zip(g).zip(b) {
                    *v = *v * gg + bb;
                }
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: stats.xhat,
                rstd: stats.rstd,
            },
            rg,
        ))
    }

    /// Batch norm with channels along `axis`; see [`kernels::batch_norm`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        axis: usize,
        gain: Var,
        bias: Var,
        running: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        kernels::check_bn_shapes(self.value(x), axis, self.value(gain), self.value(bias))?;
        let rg = self.rg(&[x, gain, bias]);
        match mode {
            Mode::Train => {
                let stats = kernels::batch_norm_stats(self.value(x), axis, kernels::BATCH_NORM_EPS)?;
                kernels::update_running(running, &stats);
                let mut y = stats.xhat.clone();
                let (g, b) = (self.value(gain).data().to_vec(), self.value(bias).data().to_vec());
                kernels::apply_channel_affine(&mut y, axis, &g, &b);
                Ok(self.push(
                    y,
                    Op::BatchNormTrain {
                        x,
                        gain,
                        bias,
                        axis,
                        xhat: stats.xhat,
                        rstd: stats.rstd,
                    },
                    rg,
                ))
            }
            Mode::Infer => {
                if self.value(x).numel() == 0 {
                    return Err(param_err("batch_norm", "empty batch"));
                }
                let (scale, shift) = kernels::infer_affine(self.value(gain), self.value(bias), running);
                let mut y = self.value(x).clone();
                kernels::apply_channel_affine(&mut y, axis, &scale, &shift);
                let inv_std = running
                    .var
                    .iter()
                    .map(|v| 1.0 / (v + kernels::BATCH_NORM_EPS).sqrt())
                    .collect();
                Ok(self.push(
                    y,
                    Op::BatchNormInfer {
                        x,
                        gain,
                        bias,
                        axis,
                        mean: running.mean.clone(),
                        inv_std,
                    },
                    rg,
                ))
            }
        }
    }

    /// Length-preserving cross-correlation on channels-last `[B, n, C_in]`.
    pub fn conv1d_nlc(&mut self, x: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let value = kernels::conv1d_nlc(self.value(x), self.value(kernel), bias.map(|b| self.value(b)), padding)?;
        let mut deps = vec![x, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                bias,
                padding,
            },
            rg,
        ))
    }

    /// Cross-correlation on `[B, C_in, n]` input (framework layout).
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        kernels::check_conv_shapes(
            self.shape(x),
            1,
            self.value(kernel),
            bias.map(|b| self.value(b)),
            padding,
        )?;
        let nlc = self.permute(x, &[0, 2, 1])?;
        let y = self.conv1d_nlc(nlc, kernel, bias, padding)?;
        self.permute(y, &[0, 2, 1])
    }

    /// Inverted dropout; identity (no node) in infer mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut RngState, mode: Mode) -> Result<Var> {
        kernels::check_dropout_p(p)?;
        if mode == Mode::Infer || p == 0.0 {
            return Ok(x);
        }
        let mask = kernels::dropout_mask(self.shape(x), p, rng)?;
        let value = self.value(x).zip_map(&mask, |a, m| a * m)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Means of `fold` contiguous equal segments of the last axis.
    pub fn segment_mean(&mut self, x: Var, fold: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| param_err("segment_average", "rank-0 input"))?;
        if fold == 0 || d % fold != 0 {
            return Err(param_err(
                "segment_average",
                format!("feature dimension {d} is not divisible by fold {fold}"),
            ));
        }
        let s = d / fold;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(s)
            .map(|seg| seg.iter().sum::<f64>() / s as f64)
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = fold;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::SegmentMean { x, fold }, rg))
    }

    /// Frequency-domain convolution of segment means.
    ///
    /// `u` is `[B, n, r]`; `l_re`, `l_im` are `[⌊n/2⌋+1, d]` with `r | d`.
    /// Output column `c` is `irfft(rfft(u[:, :, c / (d/r)]) · L[:, c])`.
    pub fn fourier_conv(&mut self, u: Var, l_re: Var, l_im: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 3 {
            return Err(param_err("fourier_convolve", format!("expected [B, n, r], got {us:?}")));
        }
        let (batch, n, r) = (us[0], us[1], us[2]);
        let ls = self.shape(l_re).to_vec();
        if ls.len() != 2
            || ls[0] != n / 2 + 1
            || self.shape(l_im) != ls.as_slice()
            || r == 0
            || !ls[1].is_multiple_of(r)
        {
            return Err(shape_err("fourier_convolve", &us, &ls));
        }
        let (h, d) = (ls[0], ls[1]);
        let s = d / r;
        let mut spec_re = Tensor::zeros(&[batch, h, r]);
        let mut spec_im = Tensor::zeros(&[batch, h, r]);
        let mut out = Tensor::zeros(&[batch, n, d]);
        let (lr, li) = (self.value(l_re).data(), self.value(l_im).data());
        let uv = self.value(u).data();
        let mut col = vec![0.0; n];
        let mut z = vec![Complex64::new(0.0, 0.0); h];
        for b in 0..batch {
            let mut spectra = Vec::with_capacity(r);
            for j in 0..r {
                for (t, c) in col.iter_mut().enumerate() {
                    *c = uv[(b * n + t) * r + j];
                }
                let sp = rfft_1d(&col);
                for (k, v) in sp.iter().enumerate() {
                    spec_re.data_mut()[(b * h + k) * r + j] = v.re;
                    spec_im.data_mut()[(b * h + k) * r + j] = v.im;
                }
                spectra.push(sp);
            }
            for c in 0..d {
                let sp = &spectra[c / s];
                for k in 0..h {
                    let (ur, ui) = (sp[k].re, sp[k].im);
                    let (wr, wi) = (lr[k * d + c], li[k * d + c]);
                    z[k] = Complex64::new(ur * wr - ui * wi, ur * wi + ui * wr);
                }
                let y = irfft_1d(&z, n);
                let o = out.data_mut();
                for (t, v) in y.into_iter().enumerate() {
                    o[(b * n + t) * d + c] = v;
                }
            }
        }
        let rg = self.rg(&[u, l_re, l_im]);
        Ok(self.push(
            out,
            Op::FourierConv {
                u,
                l_re,
                l_im,
                spec_re,
                spec_im,
            },
            rg,
        ))
    }

    /// Low-frequency cosine resynthesis along axis 1 of `[B, n, C]`,
    /// extended by `horizon` steps: output `[B, n + horizon, C]`.
    pub fn fourier_extrapolate(&mut self, x: Var, n_harm: usize, horizon: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(param_err(
                "fourier_extrapolate",
                format!("expected [B, n, C], got {xs:?}"),
            ));
        }
        let (batch, n, ch) = (xs[0], xs[1], xs[2]);
        let total = n + horizon;
        let selected = select_harmonics(n, n_harm);
        let mut out = Tensor::zeros(&[batch, total, ch]);
        let fftp = plan(n);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let xv = self.value(x).data();
        for b in 0..batch {
            for c in 0..ch {
                for (t, v) in buf.iter_mut().enumerate() {
                    *v = Complex64::new(xv[(b * n + t) * ch + c], 0.0);
                }
                fftp.forward(&mut buf);
                for &k in &selected {
                    let amplitude = buf[k].norm() / n as f64;
                    let phase = buf[k].arg();
                    let num = signed_bin(k, n);
                    for t in 0..total {
                        let (cs, sn) = bin_phase(num, t, n);
                        // cos(θ + φ) = cos θ cos φ − sin θ sin φ
                        out.data_mut()[(b * total + t) * ch + c] += amplitude * (cs * phase.cos() - sn * phase.sin());
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::FourierExtrapolate { x, selected }, rg))
    }

    /// `dropout(softmax(scale·q·kᵀ))·v` over the last two axes, keeping only
    /// the attention probabilities for the backward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        dropout_p: f64,
        rng: &mut RngState,
        mode: Mode,
    ) -> Result<Var> {
        let qd = matmul_dims(self.shape(q), self.shape(k), false, true)?;
        let vd = matmul_dims(&qd.out_shape(), self.shape(v), false, false)?;
        let lead = |s: &[usize]| s[..s.len() - 2].to_vec();
        let same_batch = lead(self.shape(q)) == lead(self.shape(k)) && lead(self.shape(k)) == lead(self.shape(v));
        if !same_batch || qd.p != vd.k {
            return Err(shape_err("attention", self.shape(q), self.shape(v)));
        }
        let (n, dh, m, dv) = (qd.m, qd.k, qd.p, vd.p);
        let slices = qd.batch_count();
        let mut probs = Tensor::zeros(&qd.out_shape());
        let mut out = Tensor::zeros(&vd.out_shape());
        let mask = if mode == Mode::Train && dropout_p > 0.0 {
            Some(kernels::dropout_mask(&qd.out_shape(), dropout_p, rng)?)
        } else {
            kernels::check_dropout_p(dropout_p)?;
            None
        };
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dropped = vec![0.0; if mask.is_some() { n * m } else { 0 }];
        for s in 0..slices {
            let p = &mut probs.data_mut()[s * n * m..(s + 1) * n * m];
            gemm(
                n,
                dh,
                m,
                scale,
                &qv[s * n * dh..(s + 1) * n * dh],
                false,
                &kv[s * m * dh..(s + 1) * m * dh],
                true,
                0.0,
                p,
            );
            kernels::softmax_rows_inplace(p, m);
            let weights: &[f64] = match &mask {
                Some(mk) => {
                    for ((o, a), b) in dropped
                        .iter_mut()
                        .zip(p.iter())
                        .zip(&mk.data()[s * n * m..(s + 1) * n * m])
                    {
                        *o = a * b;
                    }
                    &dropped
                }
                None => p,
            };
            gemm(
                n,
                m,
                dv,
                1.0,
                weights,
                false,
                &vv[s * m * dv..(s + 1) * m * dv],
                false,
                0.0,
                &mut out.data_mut()[s * n * dv..(s + 1) * n * dv],
            );
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
                mask,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `[R, K]` logits against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err("cross_entropy", &s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(param_err("cross_entropy", format!("label {bad} for {} classes", s[1])));
        }
        let probs = kernels::softmax(self.value(logits), 1)?;
        // log-sum-exp form: stays accurate for confident rows and lets NaN
        // logits surface as a NaN loss.
        let x = self.value(logits).data();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| {
                let row = &x[r * s[1]..(r + 1) * s[1]];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[l]
            })
            .sum::<f64>()
            / labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err("mse", self.shape(pred), self.shape(target)));
        }
        let diff = self.sub(pred, target)?;
        let sq = self.square(diff);
        Ok(self.mean(sq))
    }

    /// Back-propagates from a one-element `loss`, seeding its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(param_err("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = Tensor::from_parts(self.shape(loss).to_vec(), vec![1.0]);
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &g)?;
            for (var, grad) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[var.0].grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input gradients of node `i` given its output gradient.
    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let gd = g.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let (ba, bb) = (broadcast_strides(sa, out_shape), broadcast_strides(sb, out_shape));
                let mut ga = vec![0.0; gd.len()];
                let mut gb = vec![0.0; gd.len()];
                for_each_broadcast(out_shape, &ba, &bb, |f, oa, ob| {
                    let (x, y, gg) = (va[oa], vb[ob], gd[f]);
                    let (da, db) = match kind {
                        BinaryKind::Add => (gg, gg),
                        BinaryKind::Sub => (gg, -gg),
                        BinaryKind::Mul => (gg * y, gg * x),
                        BinaryKind::Div => (gg / y, -gg * x / (y * y)),
                    };
                    ga[f] = da;
                    gb[f] = db;
                });
                if self.needs(a) {
                    res.push((a, reduce_to(&ga, out_shape, sa)));
                }
                if self.needs(b) {
                    res.push((b, reduce_to(&gb, out_shape, sb)));
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let data = (0..gd.len())
                    .map(|f| match kind {
                        UnaryKind::Neg => -gd[f],
                        UnaryKind::Sqrt => gd[f] / (2.0 * yv[f]),
                        UnaryKind::Square => 2.0 * xv[f] * gd[f],
                        UnaryKind::Relu => {
                            if xv[f] > 0.0 {
                                gd[f]
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect();
                res.push((*x, Tensor::from_parts(out_shape.to_vec(), data)));
            }
            Op::Scale { x, s } => res.push((*x, g.scale(*s))),
            Op::AddScalar { x } => res.push((*x, g.clone())),
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let dims = matmul_dims(self.shape(a), self.shape(b), ta, tb)?;
                let (m, k, p) = (dims.m, dims.k, dims.p);
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let mut ga = self.needs(a).then(|| Tensor::zeros(self.shape(a)));
                let mut gb = self.needs(b).then(|| Tensor::zeros(self.shape(b)));
                for s in 0..dims.batch_count() {
                    let ao = if dims.a_batched { s * m * k } else { 0 };
                    let bo = if dims.b_batched { s * k * p } else { 0 };
                    let gs = &gd[s * m * p..(s + 1) * m * p];
                    let a_s = &av[ao..ao + m * k];
                    let b_s = &bv[bo..bo + k * p];
                    if let Some(ga) = ga.as_mut() {
                        let dst = &mut ga.data_mut()[ao..ao + m * k];
                        if ta {
                            gemm(k, p, m, 1.0, b_s, tb, gs, true, 1.0, dst);
                        } else {
                            gemm(m, p, k, 1.0, gs, false, b_s, !tb, 1.0, dst);
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let dst = &mut gb.data_mut()[bo..bo + k * p];
                        if tb {
                            gemm(p, m, k, 1.0, gs, true, a_s, ta, 1.0, dst);
                        } else {
                            gemm(k, m, p, 1.0, a_s, !ta, gs, false, 1.0, dst);
                        }
                    }
                }
                res.extend(ga.map(|t| (a, t)));
                res.extend(gb.map(|t| (b, t)));
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                res.push((*x, g.permute(&inverse)?));
            }
            Op::Reshape { x } => res.push((*x, g.reshape(self.shape(*x))?)),
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut start = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.needs(x) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            data.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        res.push((x, Tensor::from_parts(self.shape(x).to_vec(), data)));
                    }
                    start += len;
                }
            }
            Op::Gather { x, axis, indices } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = axis_split(xs, *axis);
                let mut acc = Tensor::zeros(xs);
                let dst = acc.data_mut();
                for o in 0..outer {
                    for (slot, &src) in indices.iter().enumerate() {
                        let gbase = (o * indices.len() + slot) * inner;
                        let xbase = (o * len + src) * inner;
                        for t in 0..inner {
                            dst[xbase + t] += gd[gbase + t];
                        }
                    }
                }
                res.push((*x, acc));
            }
            Op::SumAxis { x, axis } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = axis_split(xs, *axis);
                let data = (0..outer * len * inner)
                    .map(|f| {
                        let (o, i) = (f / (len * inner), f % inner);
                        gd[o * inner + i]
                    })
                    .collect();
                res.push((*x, Tensor::from_parts(xs.to_vec(), data)));
            }
            Op::SumAll { x } => res.push((*x, Tensor::full(self.shape(*x), gd[0]))),
            Op::Softmax { x } => {
                let y = node.value.data();
                let len = *out_shape.last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(len).zip(y.chunks(len)).zip(gd.chunks(len)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for t in 0..len {
                        dr[t] = yr[t] * (gr[t] - dot);
                    }
                }
                res.push((*x, Tensor::from_parts(out_shape.to_vec(), dx)));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (row, r) in rstd.iter().enumerate() {
                    let base = row * d;
                    let (gr, xr) = (&gd[base..base + d], &xhat.data()[base..base + d]);
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for t in 0..d {
                        let gh = gr[t] * gv[t];
                        mean_gh += gh;
                        mean_ghx += gh * xr[t];
                        dgain[t] += gr[t] * xr[t];
                        dbias[t] += gr[t];
                    }
                    mean_gh /= d as f64;
                    mean_ghx /= d as f64;
                    for t in 0..d {
                        dx[base + t] = r * (gr[t] * gv[t] - mean_gh - xr[t] * mean_ghx);
                    }
                }
                res.push((*x, Tensor::from_parts(out_shape.to_vec(), dx)));
                res.push((*gain, Tensor::from_parts(vec![d], dgain)));
                res.push((*bias, Tensor::from_parts(vec![d], dbias)));
            }
            Op::BatchNormTrain {
                x,
                gain,
                bias,
                axis,
                xhat,
                rstd,
            } => {
                let (outer, ch, inner) = axis_split(out_shape, *axis);
                let count = (outer * inner) as f64;
                let gv = self.value(*gain).data();
                let xh = xhat.data();
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for t in base..base + inner {
                            sum_g[c] += gd[t];
                            sum_gx[c] += gd[t] * xh[t];
                        }
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        let (mg, mgx) = (gv[c] * sum_g[c] / count, gv[c] * sum_gx[c] / count);
                        for t in base..base + inner {
                            dx[t] = rstd[c] * (gd[t] * gv[c] - mg - xh[t] * mgx);
                        }
                    }
                }
                res.push((*x, Tensor::from_parts(out_shape.to_vec(), dx)));
                res.push((*gain, Tensor::from_parts(vec![ch], sum_gx)));
                res.push((*bias, Tensor::from_parts(vec![ch], sum_g)));
            }
            Op::BatchNormInfer {
                x,
                gain,
                bias,
                axis,
                mean,
                inv_std,
            } => {
                let (outer, ch, inner) = axis_split(out_shape, *axis);
                let gv = self.value(*gain).data();
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; gd.len()];
                let mut dgain = vec![0.0; ch];
                let mut dbias = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for t in base..base + inner {
                            dx[t] = gd[t] * gv[c] * inv_std[c];
                            dgain[c] += gd[t] * (xv[t] - mean[c]) * inv_std[c];
                            dbias[c] += gd[t];
                        }
                    }
                }
                res.push((*x, Tensor::from_parts(out_shape.to_vec(), dx)));
                res.push((*gain, Tensor::from_parts(vec![ch], dgain)));
                res.push((*bias, Tensor::from_parts(vec![ch], dbias)));
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                padding,
            } => {
                let ks = self.shape(*kernel);
                let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
                let xs = self.shape(*x);
                let (batch, n) = (xs[0], xs[1]);
                let rows = batch * n;
                if self.needs(*kernel) {
                    let cols = kernels::im2col_nlc(self.value(*x).data(), batch, n, c_in, k, *padding);
                    let mut dw = vec![0.0; c_out * k * c_in];
                    gemm(c_out, rows, k * c_in, 1.0, gd, true, &cols, false, 0.0, &mut dw);
                    res.push((*kernel, kernels::rows_to_kernel(&dw, c_out, c_in, k)));
                }
                if self.needs(*x) {
                    let w = kernels::kernel_to_rows(self.value(*kernel));
                    let mut dcols = vec![0.0; rows * k * c_in];
                    gemm(rows, c_out, k * c_in, 1.0, gd, false, &w, false, 0.0, &mut dcols);
                    let dx = kernels::col2im_nlc(&dcols, batch, n, c_in, k, *padding);
                    res.push((*x, Tensor::from_parts(xs.to_vec(), dx)));
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0; c_out];
                    for row in gd.chunks(c_out) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    res.push((*b, Tensor::from_parts(vec![c_out], db)));
                }
            }
            Op::Dropout { x, mask } => res.push((*x, g.zip_map(mask, |a, m| a * m)?)),
            Op::SegmentMean { x, fold } => {
                let xs = self.shape(*x);
                let d = *xs.last().unwrap();
                let s = d / fold;
                let data = (0..gd.len() * s)
                    .map(|f| {
                        let (row, c) = (f / d, f % d);
                        gd[row * fold + c / s] / s as f64
                    })
                    .collect();
                res.push((*x, Tensor::from_parts(xs.to_vec(), data)));
            }
            Op::FourierConv {
                u,
                l_re,
                l_im,
                spec_re,
                spec_im,
            } => {
                res.extend(self.fourier_conv_vjp(*u, *l_re, *l_im, spec_re, spec_im, g));
            }
            Op::FourierExtrapolate { x, selected } => {
                let xs = self.shape(*x);
                let (batch, n, ch) = (xs[0], xs[1], xs[2]);
                let total = out_shape[1];
                let mut dx = Tensor::zeros(xs);
                let dxd = dx.data_mut();
                // Output is (1/n)·Σ_k Re(F_k·e^{2πi f_k t}), linear in x.
                for &k in selected {
                    let num = signed_bin(k, n);
                    let fwd: Vec<(f64, f64)> = (0..total).map(|t| bin_phase(num, t, n)).collect();
                    let back: Vec<(f64, f64)> = (0..n).map(|s| bin_phase(k as i64, s, n)).collect();
                    for b in 0..batch {
                        for c in 0..ch {
                            let (mut ar, mut ai) = (0.0, 0.0);
                            for (t, (cs, sn)) in fwd.iter().enumerate() {
                                let gg = gd[(b * total + t) * ch + c];
                                ar += gg * cs;
                                ai += gg * sn;
                            }
                            for (s, (cs, sn)) in back.iter().enumerate() {
                                // Re((ar + i·ai)·e^{−iθ}) / n
                                dxd[(b * n + s) * ch + c] += (ar * cs + ai * sn) / n as f64;
                            }
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
                mask,
            } => {
                res.extend(self.attention_vjp(*q, *k, *v, *scale, probs, mask.as_ref(), g)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let kk = probs.shape()[1];
                let scale = gd[0] / labels.len() as f64;
                let mut dl = probs.scale(scale);
                for (r, &l) in labels.iter().enumerate() {
                    dl.data_mut()[r * kk + l] -= scale;
                }
                res.push((*logits, dl));
            }
        }
        Ok(res)
    }

    fn fourier_conv_vjp(
        &self,
        u: Var,
        l_re: Var,
        l_im: Var,
        spec_re: &Tensor,
        spec_im: &Tensor,
        g: &Tensor,
    ) -> Vec<(Var, Tensor)> {
        let us = self.shape(u);
        let (batch, n, r) = (us[0], us[1], us[2]);
        let (h, d) = (self.shape(l_re)[0], self.shape(l_re)[1]);
        let s = d / r;
        let (lr, li) = (self.value(l_re).data(), self.value(l_im).data());
        let (sr, si) = (spec_re.data(), spec_im.data());
        let gd = g.data();
        let nyquist = if n % 2 == 0 { Some(n / 2) } else { None };
        // Weight of bin k in the Hermitian extension used by irfft.
        let weight = |k: usize| if k == 0 || Some(k) == nyquist { 1.0 } else { 2.0 };
        let mut dl_re = Tensor::zeros(&[h, d]);
        let mut dl_im = Tensor::zeros(&[h, d]);
        let mut du = Tensor::zeros(us);
        let mut col = vec![0.0; n];
        let mut du_spec = vec![Complex64::new(0.0, 0.0); h * r];
        for b in 0..batch {
            du_spec.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for c in 0..d {
                let j = c / s;
                for (t, v) in col.iter_mut().enumerate() {
                    *v = gd[(b * n + t) * d + c];
                }
                let gs = rfft_1d(&col);
                for k in 0..h {
                    let w = weight(k) / n as f64;
                    let dzr = w * gs[k].re;
                    let dzi = if k == 0 || Some(k) == nyquist {
                        0.0
                    } else {
                        w * gs[k].im
                    };
                    let (ur, ui) = (sr[(b * h + k) * r + j], si[(b * h + k) * r + j]);
                    let (wr, wi) = (lr[k * d + c], li[k * d + c]);
                    dl_re.data_mut()[k * d + c] += dzr * ur + dzi * ui;
                    dl_im.data_mut()[k * d + c] += -dzr * ui + dzi * ur;
                    du_spec[k * r + j] += Complex64::new(dzr * wr + dzi * wi, -dzr * wi + dzi * wr);
                }
            }
            let mut half = vec![Complex64::new(0.0, 0.0); h];
            for j in 0..r {
                for (k, z) in half.iter_mut().enumerate() {
                    *z = du_spec[k * r + j] * (n as f64 / weight(k));
                }
                let y = irfft_1d(&half, n);
                for (t, v) in y.into_iter().enumerate() {
                    du.data_mut()[(b * n + t) * r + j] = v;
                }
            }
        }
        let mut res = Vec::new();
        if self.needs(u) {
            res.push((u, du));
        }
        if self.needs(l_re) {
            res.push((l_re, dl_re));
        }
        if self.needs(l_im) {
            res.push((l_im, dl_im));
        }
        res
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_vjp(
        &self,
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: &Tensor,
        mask: Option<&Tensor>,
        g: &Tensor,
    ) -> Result<Vec<(Var, Tensor)>> {
        let qd = matmul_dims(self.shape(q), self.shape(k), false, true)?;
        let (n, dh, m) = (qd.m, qd.k, qd.p);
        let dv = *self.shape(v).last().unwrap();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = Tensor::zeros(self.shape(q));
        let mut dk = Tensor::zeros(self.shape(k));
        let mut dvt = Tensor::zeros(self.shape(v));
        let mut weights = vec![0.0; n * m];
        let mut dp = vec![0.0; n * m];
        let gd = g.data();
        for s in 0..qd.batch_count() {
            let p = &probs.data()[s * n * m..(s + 1) * n * m];
            let mk = mask.map(|mk| &mk.data()[s * n * m..(s + 1) * n * m]);
            match mk {
                Some(mk) => weights.iter_mut().zip(p).zip(mk).for_each(|((w, a), b)| *w = a * b),
                None => weights.copy_from_slice(p),
            }
            let gs = &gd[s * n * dv..(s + 1) * n * dv];
            let v_s = &vv[s * m * dv..(s + 1) * m * dv];
            gemm(
                m,
                n,
                dv,
                1.0,
                &weights,
                true,
                gs,
                false,
                0.0,
                &mut dvt.data_mut()[s * m * dv..(s + 1) * m * dv],
            );
            gemm(n, dv, m, 1.0, gs, false, v_s, true, 0.0, &mut dp);
            if let Some(mk) = mk {
                dp.iter_mut().zip(mk).for_each(|(a, b)| *a *= b);
            }
            for (dr, pr) in dp.chunks_mut(m).zip(p.chunks(m)) {
                let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for t in 0..m {
                    dr[t] = pr[t] * (dr[t] - dot);
                }
            }
            let q_s = &qv[s * n * dh..(s + 1) * n * dh];
            let k_s = &kv[s * m * dh..(s + 1) * m * dh];
            gemm(
                n,
                m,
                dh,
                scale,
                &dp,
                false,
                k_s,
                false,
                0.0,
                &mut dq.data_mut()[s * n * dh..(s + 1) * n * dh],
            );
            gemm(
                m,
                n,
                dh,
                scale,
                &dp,
                true,
                q_s,
                false,
                0.0,
                &mut dk.data_mut()[s * m * dh..(s + 1) * m * dh],
            );
        }
        let mut res = Vec::new();
        if self.needs(q) {
            res.push((q, dq));
        }
        if self.needs(k) {
            res.push((k, dk));
        }
        if self.needs(v) {
            res.push((v, dvt));
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_selection_small_cases() {
        assert_eq!(select_harmonics(8, 1), vec![0, 1, 7]);
        assert_eq!(select_harmonics(8, 4).len(), 8);
        assert_eq!(select_harmonics(8, 100).len(), 8);
        assert_eq!(signed_bin(4, 8), -4);
        assert_eq!(signed_bin(2, 5), 2);
        assert_eq!(signed_bin(3, 5), -2);
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = g.param(Tensor::new(&[3], vec![10.0, 20.0, 30.0]).unwrap());
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.grad(a).unwrap().data(), &[1.0; 6]);
        let bad = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::ones(&[2]));
        let b = g.constant(Tensor::ones(&[2]));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_some());
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.param(Tensor::ones(&[2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn segment_mean_rejects_indivisible() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 6]));
        let err = g.segment_mean(x, 4).unwrap_err().to_string();
        assert!(err.contains('6') && err.contains('4'), "{err}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[3, 8]));
        let l = g.cross_entropy(x, &[0, 5, 7]).unwrap();
        assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_extremes() {
        let mut g = Graph::new();
        let confident = g.param(Tensor::new(&[1, 2], vec![0.0, 800.0]).unwrap());
        let l = g.cross_entropy(confident, &[0]).unwrap();
        assert_eq!(g.value(l).item(), 800.0);
        let nan = g.param(Tensor::new(&[1, 2], vec![f64::NAN, 1.0]).unwrap());
        let l = g.cross_entropy(nan, &[1]).unwrap();
        assert!(g.value(l).item().is_nan());
    }
}
