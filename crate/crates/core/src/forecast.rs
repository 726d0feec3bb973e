//! Time-series forecasting: per-window standardization, an encoder stack,
//! a learned projection back to the input channels and a low-frequency
//! Fourier extrapolation decoder. Also CSV ingestion, window splitting and
//! error metrics.

use std::path::Path;

use s3attn_numerics::graph::select_harmonics as select_bins;
use s3attn_numerics::{Graph, RngState, Tensor, Var};

use crate::attention::{EncoderBlock, MixerKind, SkeletonConfig};
use crate::error::{param_err, CoreError, Result};
use crate::params::{uniform_init, Ctx, ParamId, ParamStore};
use crate::smoother::SmootherConfig;

/// Added to the per-channel variance before taking the square root.
pub const VARIANCE_OFFSET: f64 = 1.0;

/// Per-window, per-channel statistics used to undo standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationState {
    /// `[B, 1, C]`
    pub mean: Tensor,
    /// `[B, 1, C]`, `√(var + 1)` with the unbiased variance; always ≥ 1.
    pub scale: Tensor,
}

/// Graph form of [`standardize`]: returns `(standardized, mean, scale)`.
pub fn standardize_var(g: &mut Graph, x: Var) -> Result<(Var, Var, Var)> {
    let n = match *g.shape(x) {
        [_, n, _] => n,
        ref s => return Err(param_err("standardize", format!("expected [B, n, C], got {s:?}"))),
    };
    if n < 2 {
        return Err(param_err(
            "standardize",
            format!("need at least 2 steps for a variance, got {n}"),
        ));
    }
    let mean = g.mean_axis(x, 1)?;
    let centered = g.sub(x, mean)?;
    let sq = g.square(centered);
    let ss = g.sum_axis(sq, 1)?;
    let var = g.scale(ss, 1.0 / (n - 1) as f64);
    let shifted = g.add_scalar(var, VARIANCE_OFFSET);
    let scale = g.sqrt(shifted);
    let out = g.div(centered, scale)?;
    Ok((out, mean, scale))
}

/// Graph form of [`destandardize`].
pub fn destandardize_var(g: &mut Graph, x: Var, mean: Var, scale: Var) -> Result<Var> {
    let scaled = g.mul(x, scale)?;
    Ok(g.add(scaled, mean)?)
}

/// Removes each channel's mean over time and divides by `√(var + 1)`.
pub fn standardize(x: &Tensor) -> Result<(Tensor, StandardizationState)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (out, mean, scale) = standardize_var(&mut g, xv)?;
    Ok((
        g.value(out).clone(),
        StandardizationState {
            mean: g.value(mean).clone(),
            scale: g.value(scale).clone(),
        },
    ))
}

pub fn destandardize(x: &Tensor, state: &StandardizationState) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mean = g.constant(state.mean.clone());
    let scale = g.constant(state.scale.clone());
    let out = destandardize_var(&mut g, xv, mean, scale)?;
    Ok(g.value(out).clone())
}

/// Full-FFT bin indices by ascending `|fftfreq|`, ties in index order,
/// truncated to `min(1 + 2·n_harm, n)`.
pub fn select_harmonics(n: usize, n_harm: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(param_err("select_harmonics", "n must be positive"));
    }
    Ok(select_bins(n, n_harm))
}

/// Cosine resynthesis of the selected harmonics over `n + n_predict` steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FourierExtrapolator {
    pub n: usize,
    pub n_harm: usize,
    pub n_predict: usize,
    pub selected: Vec<usize>,
}

impl FourierExtrapolator {
    pub fn new(n: usize, n_harm: usize, n_predict: usize) -> Result<Self> {
        Ok(Self {
            n,
            n_harm,
            n_predict,
            selected: select_harmonics(n, n_harm)?,
        })
    }

    pub fn forward_var(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x).get(1) != Some(&self.n) {
            return Err(param_err(
                "fourier_extrapolate",
                format!("expected window length {}, got {:?}", self.n, g.shape(x)),
            ));
        }
        Ok(g.fourier_extrapolate(x, self.n_harm, self.n_predict)?)
    }
}

/// `[B, n, C] → [B, n + n_predict, C]`: in-sample reconstruction followed by
/// the continuation.
pub fn fourier_extrapolate(x: &Tensor, n_harm: usize, n_predict: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = g.fourier_extrapolate(xv, n_harm, n_predict)?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecastConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub channels: usize,
    pub n_harm: usize,
    pub d: usize,
    pub heads: usize,
    pub fold: usize,
    pub s1: usize,
    pub s2: usize,
    pub layers: usize,
    pub dropout_smoother: f64,
    pub dropout_attn: f64,
}

impl ForecastConfig {
    pub fn block_kind(&self) -> MixerKind {
        MixerKind::Skeleton {
            smoother: SmootherConfig::new(self.input_len, self.d, self.fold, self.dropout_smoother),
            attention: SkeletonConfig::new(self.input_len, self.d, self.heads, self.s1, self.s2, self.dropout_attn),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub config: ForecastConfig,
    /// `[C, d]`
    pub embedding: ParamId,
    pub blocks: Vec<EncoderBlock>,
    /// `[d, C]`
    pub post_projection: ParamId,
    pub extrapolator: FourierExtrapolator,
}

impl ForecastModel {
    pub fn new(config: ForecastConfig, store: &mut ParamStore, rng: &mut RngState) -> Result<Self> {
        if config.channels == 0 || config.layers == 0 {
            return Err(param_err("forecast_model", "channels and layers must be positive"));
        }
        let (c, d) = (config.channels, config.d);
        let embedding = store.add("embed", uniform_init(&[c, d], 1.0 / (c as f64).sqrt(), rng));
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(config.block_kind(), false, store, &format!("block{i}"), rng))
            .collect::<Result<Vec<_>>>()?;
        let post_projection = store.add("post", uniform_init(&[d, c], 1.0 / (d as f64).sqrt(), rng));
        Ok(Self {
            config,
            embedding,
            blocks,
            post_projection,
            extrapolator: FourierExtrapolator::new(config.input_len, config.n_harm, config.horizon)?,
        })
    }

    /// `[B, n, C] → [B, horizon, C]`.
    pub fn forward(&mut self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let cfg = self.config;
        if ctx.g.shape(x).len() != 3 || ctx.g.shape(x)[1..] != [cfg.input_len, cfg.channels] {
            return Err(param_err(
                "forecast_forward",
                format!(
                    "expected [B, {}, {}], got {:?}",
                    cfg.input_len,
                    cfg.channels,
                    ctx.g.shape(x)
                ),
            ));
        }
        let (z, mean, scale) = standardize_var(ctx.g, x)?;
        let mut h = ctx.g.matmul(z, ctx.p(self.embedding))?;
        for block in &mut self.blocks {
            h = block.forward(ctx, h)?;
        }
        let post = ctx.g.matmul(h, ctx.p(self.post_projection))?;
        let ext = self.extrapolator.forward_var(ctx.g, post)?;
        let tail: Vec<usize> = (cfg.input_len..cfg.input_len + cfg.horizon).collect();
        let forecast = ctx.g.gather(ext, 1, &tail)?;
        destandardize_var(ctx.g, forecast, mean, scale)
    }
}

/// Ordered multichannel series read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    /// `[T, C]`
    pub values: Tensor,
    pub timestamps: Vec<String>,
    pub columns: Vec<String>,
    pub warnings: Vec<String>,
}

fn io_err(path: &Path, source: std::io::Error) -> CoreError {
    CoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CoreError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => io_err(path, source),
        kind => CoreError::Parse {
            line,
            column: 0,
            msg: format!("{kind:?}"),
        },
    }
}

/// Reads `value_columns` (in the given order) and the optional
/// `time_column` from a headed CSV file.
///
/// Blank cells fail with [`CoreError::MissingValues`] listing 1-based data
/// row numbers (the header is not counted). Non-numeric cells fail with
/// [`CoreError::Parse`] carrying the file line and 1-based column.
/// Timestamps that decrease are reported in `warnings`; numeric timestamps
/// are compared as numbers, others as strings.
pub fn ingest_csv(path: &Path, time_column: Option<&str>, value_columns: &[&str]) -> Result<Series> {
    if value_columns.is_empty() {
        return Err(param_err("ingest_csv", "no value columns requested"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| CoreError::Parse {
            line: 1,
            column: 0,
            msg: format!("no column named {name:?}"),
        })
    };
    let value_idx = value_columns.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let time_idx = time_column.map(find).transpose()?;

    let mut data = Vec::new();
    let mut timestamps = Vec::new();
    let mut missing = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map_or(row + 2, |p| p.line() as usize);
        let mut row_missing = false;
        for &j in &value_idx {
            let cell = record.get(j).unwrap_or("");
            if cell.is_empty() {
                row_missing = true;
                data.push(f64::NAN);
                continue;
            }
            let v = cell.parse::<f64>().map_err(|e| CoreError::Parse {
                line,
                column: j + 1,
                msg: format!("{cell:?}: {e}"),
            })?;
            data.push(v);
        }
        if row_missing {
            missing.push(row + 1);
        }
        timestamps.push(match time_idx {
            Some(j) => record.get(j).unwrap_or("").to_string(),
            None => row.to_string(),
        });
    }
    if !missing.is_empty() {
        return Err(CoreError::MissingValues { rows: missing });
    }
    let rows = timestamps.len();
    let warnings = timestamp_warnings(&timestamps);
    Ok(Series {
        values: Tensor::new(&[rows, value_idx.len()], data)?,
        timestamps,
        columns: value_columns.iter().map(|c| c.to_string()).collect(),
        warnings,
    })
}

fn timestamp_warnings(ts: &[String]) -> Vec<String> {
    let numeric: Option<Vec<f64>> = ts.iter().map(|t| t.parse::<f64>().ok()).collect();
    let decreasing = |i: usize| match &numeric {
        Some(v) => v[i] < v[i - 1],
        None => ts[i] < ts[i - 1],
    };
    (1..ts.len())
        .filter(|&i| decreasing(i))
        .map(|i| {
            format!(
                "timestamp at data row {} ({}) precedes the previous row ({})",
                i + 1,
                ts[i],
                ts[i - 1]
            )
        })
        .collect()
}

/// Window start offsets (into the full series) for each 7:1:2 segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Cuts `[0, T)` at `⌊0.7T⌋` and `⌊0.8T⌋` and enumerates every window of
/// `input_len + horizon` steps lying wholly inside each segment.
pub fn split_windows(total: usize, input_len: usize, horizon: usize) -> Result<WindowSplits> {
    if input_len == 0 || horizon == 0 {
        return Err(param_err("split_windows", "input_len and horizon must be positive"));
    }
    let train_end = total * 7 / 10;
    let val_end = total * 8 / 10;
    let span = input_len + horizon;
    let starts = |lo: usize, hi: usize| -> Vec<usize> {
        if hi < lo + span {
            Vec::new()
        } else {
            (lo..=hi - span).collect()
        }
    };
    Ok(WindowSplits {
        train: starts(0, train_end),
        val: starts(train_end, val_end),
        test: starts(val_end, total),
    })
}

/// Stacks `[input_len]` inputs and `[horizon]` targets for the given
/// window starts: `([B, input_len, C], [B, horizon, C])`.
pub fn gather_windows(series: &Tensor, starts: &[usize], input_len: usize, horizon: usize) -> Result<(Tensor, Tensor)> {
    let (t, c) = (series.rows(), series.cols());
    if starts.iter().any(|&s| s + input_len + horizon > t) {
        return Err(param_err("gather_windows", "window runs past the end of the series"));
    }
    let d = series.data();
    let cut = |offset: usize, len: usize| {
        let mut out = Vec::with_capacity(starts.len() * len * c);
        for &s in starts {
            out.extend_from_slice(&d[(s + offset) * c..(s + offset + len) * c]);
        }
        out
    };
    Ok((
        Tensor::new(&[starts.len(), input_len, c], cut(0, input_len))?,
        Tensor::new(&[starts.len(), horizon, c], cut(input_len, horizon))?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

pub fn evaluate(pred: &Tensor, truth: &Tensor) -> Result<Metrics> {
    if pred.shape() != truth.shape() || pred.numel() == 0 {
        return Err(param_err(
            "evaluate",
            format!(
                "shapes {:?} and {:?} must agree and be non-empty",
                pred.shape(),
                truth.shape()
            ),
        ));
    }
    let n = pred.numel() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.data().iter().zip(truth.data()) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok(Metrics {
        mse: se / n,
        mae: ae / n,
    })
}

/// Writes `[horizon, C]` predictions with a leading step index column.
pub fn write_predictions(path: &Path, first_step: usize, pred: &Tensor, columns: &[String]) -> Result<()> {
    if pred.rank() != 2 || pred.cols() != columns.len() {
        return Err(param_err("write_predictions", "prediction columns do not match names"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["step".to_string()];
    header.extend(columns.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..pred.rows() {
        let mut rec = vec![(first_step + i).to_string()];
        rec.extend(pred.row(i).iter().map(|v| format!("{v:.6e}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
