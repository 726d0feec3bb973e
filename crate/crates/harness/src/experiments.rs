//! Scaling benchmark, noise robustness, ablation and parameter sweeps.

use std::time::Instant;

use s3attn_numerics::memory;

use crate::config::{ExperimentConfig, ModelKind, Task};
use crate::error::{HarnessError, Result};
use crate::output::{ResultTable, Value};
use crate::train::{train, Trainer};

/// Keeps freed buffers inside the process heap so large activations are
/// reused between steps instead of being unmapped and faulted back in.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts glibc allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample standard deviation over `√k`);
/// zero for fewer than two values.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    (0..cfg.replicates.max(1) as u64).map(|i| cfg.seed + i).collect()
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCell {
    pub model: ModelKind,
    pub n: usize,
    /// `None` for a cell recorded as out-of-memory.
    pub median_step_secs: Option<f64>,
    pub peak_bytes: Option<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub cells: Vec<BenchCell>,
    pub seed: u64,
}

/// Bytes held by dense attention probabilities and their gradient.
pub fn dense_attention_bytes(cfg: &ExperimentConfig) -> u64 {
    let n = cfg.n as u64;
    2 * 8 * (cfg.batch_size * cfg.heads * cfg.layers) as u64 * n * n
}

impl BenchReport {
    pub fn cell(&self, model: ModelKind, n: usize) -> Option<&BenchCell> {
        self.cells.iter().find(|c| c.model == model && c.n == n)
    }

    pub fn time_ratio(&self, model: ModelKind, from: usize, to: usize) -> Option<f64> {
        Some(self.cell(model, to)?.median_step_secs? / self.cell(model, from)?.median_step_secs?)
    }

    pub fn peak(&self, model: ModelKind, n: usize) -> Option<i64> {
        self.cell(model, n)?.peak_bytes
    }

    fn previous_n(&self, cell: &BenchCell) -> Option<usize> {
        self.cells
            .iter()
            .filter(|c| c.model == cell.model && c.n < cell.n)
            .map(|c| c.n)
            .max()
    }

    /// Deterministic columns: status, peak tracked bytes and the memory
    /// ratio against vanilla at the same length.
    pub fn memory_table(&self) -> ResultTable {
        let mut t = ResultTable::new(&["model", "n", "status", "peak_bytes", "memory_ratio_vs_vanilla", "seed"]);
        for c in &self.cells {
            let ratio = match (c.peak_bytes, self.peak(ModelKind::Vanilla, c.n)) {
                (Some(p), Some(v)) => Value::Float(p as f64 / v as f64),
                _ => Value::Text("NA".into()),
            };
            t.push(vec![
                c.model.name().into(),
                c.n.into(),
                status(c).into(),
                c.peak_bytes.map_or(Value::Text("OOM".into()), Value::Int),
                ratio,
                self.seed.into(),
            ])
            .expect("row width");
        }
        t
    }

    /// Wall-clock columns; these vary from run to run.
    pub fn timing_table(&self) -> ResultTable {
        let mut t = ResultTable::new(&[
            "model",
            "n",
            "status",
            "median_step_secs",
            "time_ratio_vs_previous_n",
            "speedup_vs_vanilla",
            "seed",
        ]);
        let na = || Value::Text("NA".into());
        for c in &self.cells {
            let prev = self
                .previous_n(c)
                .and_then(|p| self.time_ratio(c.model, p, c.n))
                .map_or_else(na, Value::Float);
            let speedup = match (
                c.median_step_secs,
                self.cell(ModelKind::Vanilla, c.n).and_then(|v| v.median_step_secs),
            ) {
                (Some(s), Some(v)) => Value::Float(v / s),
                _ => na(),
            };
            t.push(vec![
                c.model.name().into(),
                c.n.into(),
                status(c).into(),
                c.median_step_secs.map_or(Value::Text("OOM".into()), Value::Float),
                prev,
                speedup,
                self.seed.into(),
            ])
            .expect("row width");
        }
        t
    }
}

fn status(c: &BenchCell) -> &'static str {
    if c.median_step_secs.is_some() {
        "ok"
    } else {
        "OOM"
    }
}

/// Median forward+backward+update time and peak tracked bytes for one
/// model and length, on a fixed batch.
pub fn bench_cell(cfg: &ExperimentConfig) -> Result<BenchCell> {
    if cfg.model == ModelKind::Vanilla && dense_attention_bytes(cfg) > cfg.memory_budget {
        return Ok(BenchCell {
            model: cfg.model,
            n: cfg.n,
            median_step_secs: None,
            peak_bytes: None,
        });
    }
    let mut trainer = Trainer::new(cfg)?;
    let batch = trainer.train_batch(0);
    for step in 0..cfg.warmup_steps {
        trainer.step_on(&batch, step)?;
    }
    memory::reset_peak();
    let mut times = Vec::with_capacity(cfg.timed_steps);
    for step in 0..cfg.timed_steps.max(1) {
        let start = Instant::now();
        trainer.step_on(&batch, cfg.warmup_steps + step)?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(BenchCell {
        model: cfg.model,
        n: cfg.n,
        median_step_secs: Some(median(&times)),
        peak_bytes: Some(memory::peak_bytes()),
    })
}

/// Runs every `(model, n)` cell over `cfg.lengths` for vanilla and s3.
pub fn bench_scaling(cfg: &ExperimentConfig) -> Result<BenchReport> {
    if cfg.lengths.is_empty() || cfg.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(HarnessError::Config(format!(
            "lengths must be non-empty and strictly ascending, got {:?}",
            cfg.lengths
        )));
    }
    tune_allocator();
    let mut cells = Vec::new();
    for model in [ModelKind::Vanilla, ModelKind::S3] {
        for &n in &cfg.lengths {
            let mut c = cfg.clone();
            c.model = model;
            c.n = n;
            c.task = Task::LowrankClassify;
            cells.push(bench_cell(&c)?);
        }
    }
    Ok(BenchReport { cells, seed: cfg.seed })
}

// ------------------------------------------------------------ run records

/// One finished training run inside a multi-run experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub model: ModelKind,
    /// Noise level, variant name or swept value.
    pub key: String,
    pub seed: u64,
    pub accuracy: f64,
    pub eval_loss: f64,
    pub final_loss: f64,
}

fn record(cfg: &ExperimentConfig, key: String) -> Result<RunRecord> {
    let r = train(cfg)?;
    Ok(RunRecord {
        model: cfg.model,
        key,
        seed: cfg.seed,
        accuracy: r.accuracy,
        eval_loss: r.eval_loss,
        final_loss: r.losses.last().copied().unwrap_or(f64::NAN),
    })
}

fn runs_table(runs: &[RunRecord], key_name: &str) -> ResultTable {
    let mut t = ResultTable::new(&["model", key_name, "seed", "accuracy", "eval_loss", "final_train_loss"]);
    let mut sorted: Vec<&RunRecord> = runs.iter().collect();
    sorted.sort_by(|a, b| (a.model.name(), &a.key, a.seed).cmp(&(b.model.name(), &b.key, b.seed)));
    for r in sorted {
        t.push(vec![
            r.model.name().into(),
            r.key.clone().into(),
            r.seed.into(),
            r.accuracy.into(),
            r.eval_loss.into(),
            r.final_loss.into(),
        ])
        .expect("row width");
    }
    t
}

/// Accuracies of `model` at `key`, ordered by seed.
fn accuracies(runs: &[RunRecord], model: ModelKind, key: &str) -> Vec<(u64, f64)> {
    let mut v: Vec<(u64, f64)> = runs
        .iter()
        .filter(|r| r.model == model && r.key == key)
        .map(|r| (r.seed, r.accuracy))
        .collect();
    v.sort_by_key(|&(s, _)| s);
    v
}

/// Per-seed `f(a, b)` over seeds present in both lists.
fn paired(a: &[(u64, f64)], b: &[(u64, f64)], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter()
        .filter_map(|&(s, x)| b.iter().find(|&&(t, _)| t == s).map(|&(_, y)| f(x, y)))
        .collect()
}

// ------------------------------------------------------------- robustness

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSummary {
    pub model: ModelKind,
    pub noise: f64,
    pub mean_accuracy: f64,
    pub se: f64,
    /// `mean(a)/mean(a₀) − 1` against the lowest noise level.
    pub rel_change: f64,
    /// Standard error of the per-seed relative change.
    pub rel_change_se: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<NoiseSummary>,
    pub seed: u64,
}

fn noise_key(a: f64) -> String {
    format!("{a}")
}

impl RobustnessReport {
    pub fn summary_for(&self, model: ModelKind, noise: f64) -> Option<&NoiseSummary> {
        self.summary.iter().find(|s| s.model == model && s.noise == noise)
    }

    /// Whether mean accuracy never rises by more than one standard error
    /// from one noise level to the next.
    pub fn monotone_within_se(&self, model: ModelKind) -> bool {
        let rows: Vec<&NoiseSummary> = self.summary.iter().filter(|s| s.model == model).collect();
        rows.windows(2)
            .all(|w| w[1].mean_accuracy <= w[0].mean_accuracy + w[1].se.hypot(w[0].se))
    }

    pub fn runs_table(&self) -> ResultTable {
        runs_table(&self.runs, "noise_level")
    }

    pub fn summary_table(&self) -> ResultTable {
        let mut t = ResultTable::new(&[
            "model",
            "noise_level",
            "replicates",
            "mean_accuracy",
            "accuracy_se",
            "rel_change",
            "rel_change_se",
            "seed",
        ]);
        for s in &self.summary {
            t.push(vec![
                s.model.name().into(),
                s.noise.into(),
                s.replicates.into(),
                s.mean_accuracy.into(),
                s.se.into(),
                s.rel_change.into(),
                s.rel_change_se.into(),
                self.seed.into(),
            ])
            .expect("row width");
        }
        t
    }
}

/// Trains vanilla and s3 at every noise level over `cfg.replicates` seeds
/// starting at `cfg.seed`. Noise is injected into training and held-out
/// batches alike.
pub fn robustness(cfg: &ExperimentConfig) -> Result<RobustnessReport> {
    let mut levels = cfg.noise_levels.clone();
    if levels.is_empty() || levels.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(HarnessError::Config(format!("invalid noise levels {levels:?}")));
    }
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut runs = Vec::new();
    for model in [ModelKind::Vanilla, ModelKind::S3] {
        for &a in &levels {
            for seed in seeds(cfg) {
                let mut c = cfg.clone();
                c.model = model;
                c.noise_level = a;
                c.seed = seed;
                runs.push(record(&c, noise_key(a))?);
            }
        }
    }
    let mut summary = Vec::new();
    for model in [ModelKind::Vanilla, ModelKind::S3] {
        let base = accuracies(&runs, model, &noise_key(levels[0]));
        let base_mean = mean(&base.iter().map(|p| p.1).collect::<Vec<_>>());
        for &a in &levels {
            let acc = accuracies(&runs, model, &noise_key(a));
            let values: Vec<f64> = acc.iter().map(|p| p.1).collect();
            let m = mean(&values);
            let rel = paired(&acc, &base, |x, b| x / b - 1.0);
            summary.push(NoiseSummary {
                model,
                noise: a,
                mean_accuracy: m,
                se: standard_error(&values),
                rel_change: m / base_mean - 1.0,
                rel_change_se: standard_error(&rel),
                replicates: values.len(),
            });
        }
    }
    Ok(RobustnessReport {
        runs,
        summary,
        seed: cfg.seed,
    })
}

// --------------------------------------------------------------- ablation

/// Baseline and single-component removals, by name.
pub const ABLATION_VARIANTS: [&str; 5] = [
    "full",
    "no_fourier_conv",
    "no_conv_stem",
    "no_seq_landmark_attn",
    "no_feat_landmark_attn",
];

/// `cfg` with the named component removed.
pub fn ablated(cfg: &ExperimentConfig, variant: &str) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    c.model = ModelKind::S3;
    match variant {
        "full" => {}
        "no_fourier_conv" => c.fourier_conv = false,
        "no_conv_stem" => c.conv_stem = false,
        "no_seq_landmark_attn" => c.seq_branch = false,
        "no_feat_landmark_attn" => c.feat_branch = false,
        other => return Err(HarnessError::Config(format!("unknown ablation variant {other:?}"))),
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub variant: String,
    pub mean_accuracy: f64,
    pub se: f64,
    /// `mean(variant) − mean(full)`.
    pub delta: f64,
    /// Standard error of the per-seed difference.
    pub delta_se: f64,
    /// Parameter names and shapes equal the full model's.
    pub same_param_shapes: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<AblationSummary>,
    pub seed: u64,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.variant == name)
    }

    /// 1-based degradation rank of `name` among the removals: one plus
    /// the number of variants that lost strictly more accuracy.
    pub fn degradation_rank(&self, name: &str) -> Option<usize> {
        let d = self.variant(name)?.delta;
        Some(
            1 + self
                .summary
                .iter()
                .filter(|s| s.variant != "full" && s.delta < d)
                .count(),
        )
    }

    pub fn runs_table(&self) -> ResultTable {
        runs_table(&self.runs, "variant")
    }

    pub fn summary_table(&self) -> ResultTable {
        let mut t = ResultTable::new(&[
            "variant",
            "mean_accuracy",
            "accuracy_se",
            "delta_vs_full",
            "delta_se",
            "degradation_rank",
            "same_param_shapes",
            "seed",
        ]);
        for s in &self.summary {
            let rank = if s.variant == "full" {
                Value::Text("NA".into())
            } else {
                self.degradation_rank(&s.variant).expect("present").into()
            };
            t.push(vec![
                s.variant.clone().into(),
                s.mean_accuracy.into(),
                s.se.into(),
                s.delta.into(),
                s.delta_se.into(),
                rank,
                s.same_param_shapes.into(),
                self.seed.into(),
            ])
            .expect("row width");
        }
        t
    }
}

/// Trains the full s3 model and each single-component removal over
/// `cfg.replicates` seeds.
pub fn ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    let full_shapes = Trainer::new(&ablated(cfg, "full")?)?.store.shapes();
    let mut runs = Vec::new();
    let mut shapes_match = Vec::new();
    for variant in ABLATION_VARIANTS {
        let base = ablated(cfg, variant)?;
        shapes_match.push(Trainer::new(&base)?.store.shapes() == full_shapes);
        for seed in seeds(cfg) {
            let mut c = base.clone();
            c.seed = seed;
            runs.push(record(&c, variant.to_string())?);
        }
    }
    let full = accuracies(&runs, ModelKind::S3, "full");
    let full_mean = mean(&full.iter().map(|p| p.1).collect::<Vec<_>>());
    let summary = ABLATION_VARIANTS
        .iter()
        .zip(shapes_match)
        .map(|(&variant, same)| {
            let acc = accuracies(&runs, ModelKind::S3, variant);
            let values: Vec<f64> = acc.iter().map(|p| p.1).collect();
            let m = mean(&values);
            AblationSummary {
                variant: variant.to_string(),
                mean_accuracy: m,
                se: standard_error(&values),
                delta: m - full_mean,
                delta_se: standard_error(&paired(&acc, &full, |x, f| x - f)),
                same_param_shapes: same,
            }
        })
        .collect();
    Ok(AblationReport {
        runs,
        summary,
        seed: cfg.seed,
    })
}

// ------------------------------------------------------------------ sweep

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub param: String,
    pub runs: Vec<RunRecord>,
    /// `(value, reason)` for values rejected before training.
    pub skipped: Vec<(usize, String)>,
    pub seed: u64,
}

impl SweepReport {
    pub fn table(&self) -> ResultTable {
        let mut t = ResultTable::new(&[
            "param",
            "value",
            "model",
            "accuracy",
            "eval_loss",
            "final_train_loss",
            "seed",
        ]);
        for r in &self.runs {
            t.push(vec![
                self.param.clone().into(),
                Value::Int(r.key.parse().expect("numeric sweep value")),
                r.model.name().into(),
                r.accuracy.into(),
                r.eval_loss.into(),
                r.final_loss.into(),
                r.seed.into(),
            ])
            .expect("row width");
        }
        t
    }

    pub fn skipped_table(&self) -> ResultTable {
        let mut t = ResultTable::new(&["param", "value", "reason", "seed"]);
        for (v, reason) in &self.skipped {
            t.push(vec![
                self.param.clone().into(),
                (*v).into(),
                reason.clone().into(),
                self.seed.into(),
            ])
            .expect("row width");
        }
        t
    }
}

/// One training run per value of `fold`, `s1` or `s2`; values the
/// architecture rejects are skipped with the validation message.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let param = cfg.sweep_param.as_str();
    if !matches!(param, "fold" | "s1" | "s2") {
        return Err(HarnessError::Config(format!(
            "sweep_param must be fold, s1 or s2, got {param:?}"
        )));
    }
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for &value in &cfg.sweep_values {
        let mut c = cfg.clone();
        c.set(param, &value.to_string())?;
        if let Err(e) = c.validate() {
            skipped.push((value, e.to_string()));
            continue;
        }
        runs.push(record(&c, value.to_string())?);
    }
    Ok(SweepReport {
        param: param.to_string(),
        runs,
        skipped,
        seed: cfg.seed,
    })
}
