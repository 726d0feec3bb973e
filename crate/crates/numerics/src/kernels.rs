//! Forward kernels of the neural primitives on plain tensors.
//!
//! The differentiable versions in [`crate::graph`] call these and add the
//! matching backward rules.

use crate::error::{param_err, shape_err, Result};
use crate::linalg::gemm;
use crate::rng::RngState;
use crate::tensor::{axis_split, Tensor};

/// Train or inference behaviour of batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(param_err("softmax", format!("axis {axis} for shape {:?}", x.shape())));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * len + t) * inner + i;
            let max = (0..len).map(|t| data[at(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for t in 0..len {
                let e = (data[at(t)] - max).exp();
                data[at(t)] = e;
                total += e;
            }
            for t in 0..len {
                data[at(t)] /= total;
            }
        }
    }
    Ok(out)
}

/// Softmax over contiguous rows of length `len`, in place.
pub(crate) fn softmax_rows_inplace(data: &mut [f64], len: usize) {
    for row in data.chunks_mut(len) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = 1.0 / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Normalized values and reciprocal standard deviations of a layer norm.
pub(crate) struct Normalized {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_stats(x: &Tensor, eps: f64) -> Normalized {
    let d = *x.shape().last().expect("layer_norm on rank-0 tensor");
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.numel() / d.max(1));
    for row in xhat.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * r);
        rstd.push(r);
    }
    Normalized { xhat, rstd }
}

/// Layer norm over the last axis with biased variance (`eps` inside the root).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.shape().last().copied().unwrap_or(0);
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(shape_err("layer_norm", x.shape(), gain.shape()));
    }
    let mut y = layer_norm_stats(x, eps).xhat;
    apply_affine_last(&mut y, gain, bias);
    Ok(y)
}

fn apply_affine_last(y: &mut Tensor, gain: &Tensor, bias: &Tensor) {
    let d = gain.numel();
    for row in y.data_mut().chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
}

/// Running statistics of a batch norm (one entry per channel).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub(crate) struct BatchStats {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

/// Per-channel normalization over every axis but `axis`.
pub(crate) fn batch_norm_stats(x: &Tensor, axis: usize, eps: f64) -> Result<BatchStats> {
    if axis >= x.rank() {
        return Err(param_err(
            "batch_norm",
            format!("channel axis {axis} for shape {:?}", x.shape()),
        ));
    }
    let (outer, channels, inner) = axis_split(x.shape(), axis);
    let count = outer * inner;
    if count == 0 {
        return Err(param_err("batch_norm", "empty batch"));
    }
    let data = x.data();
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for o in 0..outer {
        for (c, m) in mean.iter_mut().enumerate() {
            let base = (o * channels + c) * inner;
            *m += data[base..base + inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for o in 0..outer {
        for c in 0..channels {
            let base = (o * channels + c) * inner;
            var[c] += data[base..base + inner]
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    let biased: Vec<f64> = var.iter().map(|v| v / count as f64).collect();
    let unbiased_var = var
        .iter()
        .map(|v| if count > 1 { v / (count - 1) as f64 } else { 0.0 })
        .collect();
    let rstd: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let out = xhat.data_mut();
    for o in 0..outer {
        for c in 0..channels {
            let base = (o * channels + c) * inner;
            for v in &mut out[base..base + inner] {
                *v = (*v - mean[c]) * rstd[c];
            }
        }
    }
    Ok(BatchStats {
        xhat,
        rstd,
        mean,
        unbiased_var,
    })
}

pub(crate) fn apply_channel_affine(y: &mut Tensor, axis: usize, scale: &[f64], shift: &[f64]) {
    let (outer, channels, inner) = axis_split(y.shape(), axis);
    let data = y.data_mut();
    for o in 0..outer {
        for c in 0..channels {
            let base = (o * channels + c) * inner;
            for v in &mut data[base..base + inner] {
                *v = *v * scale[c] + shift[c];
            }
        }
    }
}

pub(crate) fn check_bn_shapes(x: &Tensor, axis: usize, gain: &Tensor, bias: &Tensor) -> Result<()> {
    if axis >= x.rank() || gain.shape() != [x.shape()[axis]] || bias.shape() != gain.shape() {
        return Err(shape_err("batch_norm", x.shape(), gain.shape()));
    }
    Ok(())
}

/// Batch norm with channels along `axis`.
///
/// Train mode normalizes with biased batch statistics and moves `running`
/// towards the batch mean and unbiased batch variance with momentum
/// [`BATCH_NORM_MOMENTUM`]. Infer mode uses `running`.
pub fn batch_norm(
    x: &Tensor,
    axis: usize,
    gain: &Tensor,
    bias: &Tensor,
    running: &mut RunningStats,
    mode: Mode,
) -> Result<Tensor> {
    check_bn_shapes(x, axis, gain, bias)?;
    match mode {
        Mode::Train => {
            let stats = batch_norm_stats(x, axis, BATCH_NORM_EPS)?;
            update_running(running, &stats);
            let mut y = stats.xhat;
            apply_channel_affine(&mut y, axis, gain.data(), bias.data());
            Ok(y)
        }
        Mode::Infer => {
            if x.numel() == 0 {
                return Err(param_err("batch_norm", "empty batch"));
            }
            let (scale, shift) = infer_affine(gain, bias, running);
            let mut y = x.clone();
            apply_channel_affine(&mut y, axis, &scale, &shift);
            Ok(y)
        }
    }
}

pub(crate) fn update_running(running: &mut RunningStats, stats: &BatchStats) {
    let m = BATCH_NORM_MOMENTUM;
    for (r, b) in running.mean.iter_mut().zip(&stats.mean) {
        *r = (1.0 - m) * *r + m * b;
    }
    for (r, b) in running.var.iter_mut().zip(&stats.unbiased_var) {
        *r = (1.0 - m) * *r + m * b;
    }
}

/// `y = x·scale + shift` equivalent of inference-mode batch norm.
pub(crate) fn infer_affine(gain: &Tensor, bias: &Tensor, running: &RunningStats) -> (Vec<f64>, Vec<f64>) {
    let scale: Vec<f64> = gain
        .data()
        .iter()
        .zip(&running.var)
        .map(|(g, v)| g / (v + BATCH_NORM_EPS).sqrt())
        .collect();
    let shift = bias
        .data()
        .iter()
        .zip(&running.mean)
        .zip(&scale)
        .map(|((b, m), s)| b - m * s)
        .collect();
    (scale, shift)
}

/// `cols[b, t, j·C + c] = x[b, t + j − pad, c]` (zero outside).
pub(crate) fn im2col_nlc(x: &[f64], batch: usize, n: usize, c_in: usize, k: usize, pad: usize) -> Vec<f64> {
    let width = c_in * k;
    let mut cols = vec![0.0; batch * n * width];
    for b in 0..batch {
        for t in 0..n {
            let row = &mut cols[(b * n + t) * width..(b * n + t + 1) * width];
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let s = (b * n + src as usize) * c_in;
                row[j * c_in..(j + 1) * c_in].copy_from_slice(&x[s..s + c_in]);
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col_nlc`].
pub(crate) fn col2im_nlc(cols: &[f64], batch: usize, n: usize, c_in: usize, k: usize, pad: usize) -> Vec<f64> {
    let width = c_in * k;
    let mut x = vec![0.0; batch * n * c_in];
    for b in 0..batch {
        for t in 0..n {
            let row = &cols[(b * n + t) * width..(b * n + t + 1) * width];
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let s = (b * n + src as usize) * c_in;
                for (dst, v) in x[s..s + c_in].iter_mut().zip(&row[j * c_in..(j + 1) * c_in]) {
                    *dst += v;
                }
            }
        }
    }
    x
}

/// Kernel `[C_out, C_in, k]` reordered to `[C_out, k·C_in]` matching the
/// im2col column layout.
pub(crate) fn kernel_to_rows(kernel: &Tensor) -> Vec<f64> {
    let (c_out, c_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let mut w = vec![0.0; c_out * k * c_in];
    for o in 0..c_out {
        for c in 0..c_in {
            for j in 0..k {
                w[o * k * c_in + j * c_in + c] = kernel.data()[(o * c_in + c) * k + j];
            }
        }
    }
    w
}

pub(crate) fn rows_to_kernel(w: &[f64], c_out: usize, c_in: usize, k: usize) -> Tensor {
    Tensor::from_fn(&[c_out, c_in, k], |f| {
        let (o, c, j) = (f / (c_in * k), (f / k) % c_in, f % k);
        w[o * k * c_in + j * c_in + c]
    })
}

pub(crate) fn check_conv_shapes(
    x_shape: &[usize],
    channel_axis: usize,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    if x_shape.len() != 3 || kernel.rank() != 3 {
        return Err(shape_err("conv1d", x_shape, kernel.shape()));
    }
    let (c_out, c_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    let n = x_shape[3 - channel_axis];
    if x_shape[channel_axis] != c_in {
        return Err(shape_err("conv1d", x_shape, kernel.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err("conv1d bias", b.shape(), &[c_out]));
        }
    }
    if k != 2 * padding + 1 {
        return Err(param_err(
            "conv1d",
            format!("kernel size {k} with padding {padding} does not preserve length"),
        ));
    }
    Ok((x_shape[0], c_in, n, c_out, k))
}

/// Length-preserving cross-correlation on channels-last input `[B, n, C_in]`.
pub fn conv1d_nlc(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
    let (batch, c_in, n, c_out, k) = check_conv_shapes(x.shape(), 2, kernel, bias, padding)?;
    let cols = im2col_nlc(x.data(), batch, n, c_in, k, padding);
    let w = kernel_to_rows(kernel);
    let mut out = Tensor::zeros(&[batch, n, c_out]);
    gemm(
        batch * n,
        c_in * k,
        c_out,
        1.0,
        &cols,
        false,
        &w,
        true,
        0.0,
        out.data_mut(),
    );
    if let Some(b) = bias {
        for row in out.data_mut().chunks_mut(c_out) {
            row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
        }
    }
    Ok(out)
}

/// Zero-padded, length-preserving cross-correlation on `[B, C_in, n]`
/// input with a `[C_out, C_in, k]` kernel, `k = 2·padding + 1`.
pub fn conv1d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
    check_conv_shapes(x.shape(), 1, kernel, bias, padding)?;
    let nlc = x.permute(&[0, 2, 1])?;
    conv1d_nlc(&nlc, kernel, bias, padding)?.permute(&[0, 2, 1])
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v < 0.0 { 0.0 } else { v })
}

/// Inverted-dropout mask: 0 with probability `p`, else `1/(1−p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut RngState) -> Result<Tensor> {
    check_dropout_p(p)?;
    let keep = 1.0 / (1.0 - p);
    Ok(Tensor::from_fn(shape, |_| if rng.uniform() < p { 0.0 } else { keep }))
}

pub(crate) fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(param_err("dropout", format!("probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout in train mode, identity in infer mode.
pub fn dropout(x: &Tensor, p: f64, rng: &mut RngState, mode: Mode) -> Result<Tensor> {
    check_dropout_p(p)?;
    if mode == Mode::Infer || p == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), p, rng)?;
    x.zip_map(&mask, |a, m| a * m)
}
