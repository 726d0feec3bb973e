//! Subcommand execution: runs an experiment and writes its tables.
//!
//! Every file written here is a deterministic function of the config,
//! except the `*_timing` tables, which hold wall-clock measurements.

use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, Task};
use crate::error::Result;
use crate::experiments::{ablation, bench_scaling, robustness, sweep};
use crate::forecast_run::{load_series, run_forecast};
use crate::output::{emit_config, emit_results, Format, ResultTable};
use crate::props::{incoherence_cases, sketch_reconstruction, smooth_bound, smooth_incoherence};
use crate::train::train;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Bench,
    Robustness,
    Ablate,
    Sweep,
    Sketch,
    Smooth,
    Forecast,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Bench => "bench",
            Command::Robustness => "robustness",
            Command::Ablate => "ablate",
            Command::Sweep => "sweep",
            Command::Sketch => "sketch",
            Command::Smooth => "smooth",
            Command::Forecast => "forecast",
        }
    }
}

struct Writer<'a> {
    cfg: &'a ExperimentConfig,
    format: Format,
    written: Vec<PathBuf>,
}

impl Writer<'_> {
    fn table(&mut self, stem: &str, table: &ResultTable) -> Result<()> {
        let path = self.cfg.output_dir.join(format!("{stem}.{}", self.format.extension()));
        emit_results(table, self.cfg, self.format, &path)?;
        self.written.push(path);
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let path = self.cfg.output_dir.join(name);
        self.written.push(path.clone());
        path
    }
}

/// Runs `cmd` under `cfg`, writing into `cfg.output_dir`. Returns the
/// written paths and one human-readable summary line per result.
pub fn execute(cmd: Command, cfg: &ExperimentConfig, format: Format) -> Result<(Vec<PathBuf>, Vec<String>)> {
    let mut w = Writer {
        cfg,
        format,
        written: Vec::new(),
    };
    let mut lines = Vec::new();
    let config_path = w.path("config.txt");
    emit_config(cfg, &config_path)?;
    match cmd {
        Command::Train => {
            let r = train(cfg)?;
            let mut losses = ResultTable::new(&["step", "loss", "seed"]);
            for (s, &l) in r.losses.iter().enumerate() {
                losses.push(vec![s.into(), l.into(), r.seed.into()])?;
            }
            let mut summary = ResultTable::new(&[
                "task",
                "model",
                "steps",
                "accuracy",
                "eval_loss",
                "final_train_loss",
                "peak_bytes",
                "seed",
            ]);
            summary.push(vec![
                cfg.task.name().into(),
                cfg.model.name().into(),
                cfg.steps.into(),
                r.accuracy.into(),
                r.eval_loss.into(),
                r.losses.last().copied().unwrap_or(f64::NAN).into(),
                r.peak_bytes.into(),
                r.seed.into(),
            ])?;
            let mut timing = ResultTable::new(&["steps_per_sec", "seed"]);
            timing.push(vec![r.steps_per_sec.into(), r.seed.into()])?;
            w.table("train_losses", &losses)?;
            w.table("train_summary", &summary)?;
            w.table("train_timing", &timing)?;
            lines.push(format!(
                "accuracy {:.4}, eval loss {:.4}, {:.2} steps/s",
                r.accuracy, r.eval_loss, r.steps_per_sec
            ));
        }
        Command::Bench => {
            let report = bench_scaling(cfg)?;
            w.table("bench_memory", &report.memory_table())?;
            w.table("bench_timing", &report.timing_table())?;
            for c in &report.cells {
                lines.push(match (c.median_step_secs, c.peak_bytes) {
                    (Some(t), Some(p)) => format!(
                        "{} n={}: median step {:.4} s, peak {:.1} MB",
                        c.model.name(),
                        c.n,
                        t,
                        p as f64 / 1e6
                    ),
                    _ => format!("{} n={}: OOM", c.model.name(), c.n),
                });
            }
        }
        Command::Robustness => {
            let report = robustness(cfg)?;
            w.table("robustness_runs", &report.runs_table())?;
            w.table("robustness_summary", &report.summary_table())?;
            for s in &report.summary {
                lines.push(format!(
                    "{} a={}: accuracy {:.4} ± {:.4}, relative change {:+.2}%",
                    s.model.name(),
                    s.noise,
                    s.mean_accuracy,
                    s.se,
                    100.0 * s.rel_change
                ));
            }
        }
        Command::Ablate => {
            let report = ablation(cfg)?;
            w.table("ablation_runs", &report.runs_table())?;
            w.table("ablation_summary", &report.summary_table())?;
            for s in &report.summary {
                lines.push(format!(
                    "{}: accuracy {:.4} ± {:.4}, delta {:+.4}",
                    s.variant, s.mean_accuracy, s.se, s.delta
                ));
            }
        }
        Command::Sweep => {
            let report = sweep(cfg)?;
            w.table("sweep", &report.table())?;
            w.table("sweep_skipped", &report.skipped_table())?;
            for r in &report.runs {
                lines.push(format!("{}={}: accuracy {:.4}", report.param, r.key, r.accuracy));
            }
            for (v, reason) in &report.skipped {
                lines.push(format!("{}={}: skipped ({reason})", report.param, v));
            }
        }
        Command::Sketch => {
            if cfg.task != Task::Incoherence {
                let r = sketch_reconstruction(cfg)?;
                w.table("sketch_reconstruction", &r.reconstruction)?;
                w.table("sketch_noise_scaling", &r.noise_scaling)?;
                lines.push(format!(
                    "noiseless recovery rate {:.4}; error ratio at doubled noise {:.4}",
                    r.recovery_rate_noiseless, r.noise_ratio
                ));
            }
            if cfg.task != Task::Prop1 {
                w.table("sketch_incoherence", &incoherence_cases(cfg)?)?;
                lines.push("incoherence cases written".into());
            }
        }
        Command::Smooth => {
            if cfg.task != Task::Incoherence {
                let r = smooth_bound(cfg)?;
                w.table("smooth_bound", &r.table)?;
                lines.push(format!(
                    "violation rate {:.4}; bound ratio 4n/n {:.4}",
                    r.violation_rate, r.bound_ratio
                ));
            }
            if cfg.task != Task::Prop2 {
                let r = smooth_incoherence(cfg)?;
                w.table("smooth_incoherence", &r.summary)?;
                w.table("smooth_incoherence_trials", &r.per_trial)?;
                lines.push(format!(
                    "incoherence improved in {:.1}% of trials, mean reduction {:.1}%",
                    100.0 * r.improved_fraction,
                    100.0 * r.reduction_fraction
                ));
            }
        }
        Command::Forecast => {
            let series = load_series(cfg)?;
            let r = run_forecast(cfg, &series)?;
            w.table("forecast_metrics", &r.metrics)?;
            w.table("forecast_losses", &r.losses)?;
            let pred_path = w.path("forecast_predictions.csv");
            s3attn_core::forecast::write_predictions(
                &pred_path,
                r.first_test_step,
                &r.first_test_prediction,
                &r.columns,
            )?;
            lines.extend(r.warnings.iter().map(|m| format!("warning: {m}")));
            for row in 0..r.metrics.rows.len() {
                lines.push(format!(
                    "{}: mse {}, mae {}",
                    r.metrics.rows[row][0], r.metrics.rows[row][2], r.metrics.rows[row][3]
                ));
            }
        }
    }
    Ok((w.written, lines))
}

/// Files whose contents depend on wall-clock time.
pub fn is_timing_file(path: &Path) -> bool {
    path.file_stem()
        .and_then(|s| s.to_str())
        .is_some_and(|s| s.ends_with("_timing"))
}
