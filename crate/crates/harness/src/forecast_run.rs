//! Training and evaluation of the forecaster on a user-supplied CSV.

use s3attn_core::forecast::{
    evaluate, gather_windows, ingest_csv, split_windows, ForecastConfig, ForecastModel, Series,
};
use s3attn_core::{Ctx, Optimizer, ParamStore};
use s3attn_numerics::kernels::Mode;
use s3attn_numerics::{AdamConfig, Graph, RngState, Tensor};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::output::{csv_err, ResultTable};
use crate::train::{DROPOUT_STREAM, INIT_STREAM, TRAIN_STREAM};

#[derive(Debug, Clone)]
pub struct ForecastReport {
    /// Per-split MSE and MAE in the original units.
    pub metrics: ResultTable,
    pub losses: ResultTable,
    /// Forecast `[horizon, C]` for the first test window.
    pub first_test_prediction: Tensor,
    /// Series row of the first predicted step.
    pub first_test_step: usize,
    pub columns: Vec<String>,
    pub warnings: Vec<String>,
}

fn value_columns(cfg: &ExperimentConfig, path: &std::path::Path) -> Result<Vec<String>> {
    if !cfg.value_columns.is_empty() {
        return Ok(cfg.value_columns.clone());
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?;
    Ok(headers
        .iter()
        .filter(|h| Some(*h) != cfg.time_column.as_deref())
        .map(String::from)
        .collect())
}

/// Reads the configured CSV; all non-time columns when none are named.
pub fn load_series(cfg: &ExperimentConfig) -> Result<Series> {
    let path = cfg
        .data_path
        .as_deref()
        .ok_or_else(|| HarnessError::Config("forecast needs data_path".into()))?;
    let columns = value_columns(cfg, path)?;
    let names: Vec<&str> = columns.iter().map(String::as_str).collect();
    Ok(ingest_csv(path, cfg.time_column.as_deref(), &names)?)
}

pub fn forecast_config(cfg: &ExperimentConfig, channels: usize) -> ForecastConfig {
    ForecastConfig {
        input_len: cfg.input_len,
        horizon: cfg.horizon,
        channels,
        n_harm: cfg.n_harm,
        d: cfg.d,
        heads: cfg.heads,
        fold: cfg.fold,
        s1: cfg.s1,
        s2: cfg.s2,
        layers: cfg.layers,
        dropout_smoother: cfg.dropout_smoother,
        dropout_attn: cfg.dropout_attn,
    }
}

fn predict(model: &mut ForecastModel, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut rng = RngState::new(0);
    let mut ctx = Ctx::new(&mut g, store, Mode::Infer, &mut rng);
    let xv = ctx.g.constant(x.clone());
    let y = model.forward(&mut ctx, xv)?;
    Ok(g.value(y).clone())
}

/// Adam on the training windows for `cfg.epochs` epochs (window order
/// reshuffled per epoch), then MSE/MAE on validation and test windows.
pub fn run_forecast(cfg: &ExperimentConfig, series: &Series) -> Result<ForecastReport> {
    if cfg.input_len < 2 || cfg.horizon == 0 || cfg.batch_size == 0 {
        return Err(HarnessError::Config(
            "forecast needs input_len ≥ 2, horizon ≥ 1 and batch_size ≥ 1".into(),
        ));
    }
    let values = &series.values;
    let splits = split_windows(values.rows(), cfg.input_len, cfg.horizon)?;
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(HarnessError::Config(format!(
            "{} rows leave no train or test window of length {}",
            values.rows(),
            cfg.input_len + cfg.horizon
        )));
    }
    let root = RngState::new(cfg.seed);
    let mut store = ParamStore::new();
    let mut model = ForecastModel::new(
        forecast_config(cfg, values.cols()),
        &mut store,
        &mut root.split(INIT_STREAM),
    )?;
    let mut optimizer = Optimizer::new(
        &store,
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    let mut losses = ResultTable::new(&["step", "epoch", "loss", "seed"]);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = root.split(TRAIN_STREAM + epoch as u64).permutation(splits.train.len());
        for chunk in order.chunks(cfg.batch_size) {
            let starts: Vec<usize> = chunk.iter().map(|&i| splits.train[i]).collect();
            let (x, y) = gather_windows(values, &starts, cfg.input_len, cfg.horizon)?;
            let mut g = Graph::new();
            let mut rng = root.split(DROPOUT_STREAM + step as u64);
            let vars = store.bind(&mut g);
            let mut ctx = Ctx::from_vars(&mut g, vars.clone(), Mode::Train, &mut rng);
            let xv = ctx.g.constant(x);
            let pred = model.forward(&mut ctx, xv)?;
            let target = ctx.g.constant(y);
            let loss = ctx.g.mse(pred, target)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(HarnessError::Diverged {
                    step,
                    config: cfg.to_kv(),
                });
            }
            g.backward(loss)?;
            optimizer.step(&mut store, &g, &vars)?;
            losses.push(vec![step.into(), epoch.into(), value.into(), cfg.seed.into()])?;
            step += 1;
        }
    }
    let mut metrics = ResultTable::new(&["split", "windows", "mse", "mae", "seed"]);
    for (name, starts) in [("val", &splits.val), ("test", &splits.test)] {
        if starts.is_empty() {
            continue;
        }
        let (mut preds, mut truths) = (Vec::new(), Vec::new());
        for chunk in starts.chunks(cfg.batch_size) {
            let (x, y) = gather_windows(values, chunk, cfg.input_len, cfg.horizon)?;
            preds.extend_from_slice(predict(&mut model, &store, &x)?.data());
            truths.extend_from_slice(y.data());
        }
        let shape = [starts.len(), cfg.horizon, values.cols()];
        let m = evaluate(&Tensor::new(&shape, preds)?, &Tensor::new(&shape, truths)?)?;
        metrics.push(vec![
            name.into(),
            starts.len().into(),
            m.mse.into(),
            m.mae.into(),
            cfg.seed.into(),
        ])?;
    }
    let first = splits.test[0];
    let (x, _) = gather_windows(values, &[first], cfg.input_len, cfg.horizon)?;
    let first_test_prediction = predict(&mut model, &store, &x)?.into_reshape(&[cfg.horizon, values.cols()])?;
    Ok(ForecastReport {
        metrics,
        losses,
        first_test_prediction,
        first_test_step: first + cfg.input_len,
        columns: series.columns.clone(),
        warnings: series.warnings.clone(),
    })
}
