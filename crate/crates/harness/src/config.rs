//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. List values are
//! comma separated. Unknown keys are rejected so typos surface early.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Copy,
    LowrankClassify,
    NoisyImageLike,
    ForecastCsv,
    Bench,
    Prop1,
    Prop2,
    Incoherence,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::LowrankClassify => "lowrank_classify",
            Task::NoisyImageLike => "noisy_image_like",
            Task::ForecastCsv => "forecast_csv",
            Task::Bench => "bench",
            Task::Prop1 => "prop1",
            Task::Prop2 => "prop2",
            Task::Incoherence => "incoherence",
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "copy" => Task::Copy,
            "lowrank_classify" => Task::LowrankClassify,
            "noisy_image_like" => Task::NoisyImageLike,
            "forecast_csv" => Task::ForecastCsv,
            "bench" => Task::Bench,
            "prop1" => Task::Prop1,
            "prop2" => Task::Prop2,
            "incoherence" => Task::Incoherence,
            other => return Err(format!("unknown task {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    S3,
    Vanilla,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::S3 => "s3",
            ModelKind::Vanilla => "vanilla",
        }
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "s3" => Ok(ModelKind::S3),
            "vanilla" => Ok(ModelKind::Vanilla),
            other => Err(format!("unknown model {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelKind,
    // architecture
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub fold: usize,
    pub s1: usize,
    pub s2: usize,
    pub layers: usize,
    pub combine_scale: f64,
    pub ffn: bool,
    pub fourier_conv: bool,
    pub conv_stem: bool,
    pub seq_branch: bool,
    pub feat_branch: bool,
    // optimization
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_batches: usize,
    pub dropout_embed: f64,
    pub dropout_attn: f64,
    pub dropout_smoother: f64,
    pub seed: u64,
    // synthetic tasks
    pub noise_level: f64,
    pub d_in: usize,
    pub rank: usize,
    pub classes: usize,
    pub jitter: f64,
    pub vocab: usize,
    // forecasting
    pub input_len: usize,
    pub horizon: usize,
    pub n_harm: usize,
    pub epochs: usize,
    pub data_path: Option<PathBuf>,
    pub time_column: Option<String>,
    pub value_columns: Vec<String>,
    // proposition harnesses
    pub trials: usize,
    /// Gaussian noise level for skeleton reconstruction trials.
    pub noise_sigma: f64,
    /// Walk scale for the smoothing-bound trials.
    pub sigma: f64,
    pub delta: f64,
    pub a_max: f64,
    pub b_max: f64,
    pub r_rank: usize,
    pub sample_multiplier: f64,
    // experiment grids
    pub lengths: Vec<usize>,
    pub warmup_steps: usize,
    pub timed_steps: usize,
    /// Benchmark cells whose dense attention matrices would exceed this
    /// many bytes are recorded as out-of-memory instead of run.
    pub memory_budget: u64,
    pub noise_levels: Vec<f64>,
    pub replicates: usize,
    pub sweep_param: String,
    pub sweep_values: Vec<usize>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::LowrankClassify,
            model: ModelKind::S3,
            n: 128,
            d: 64,
            heads: 2,
            fold: 8,
            s1: 8,
            s2: 8,
            layers: 1,
            combine_scale: 0.5,
            ffn: false,
            fourier_conv: true,
            conv_stem: true,
            seq_branch: true,
            feat_branch: true,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 16,
            steps: 300,
            eval_batches: 8,
            dropout_embed: 0.0,
            dropout_attn: 0.0,
            dropout_smoother: 0.0,
            seed: 0,
            noise_level: 0.0,
            d_in: 16,
            rank: 4,
            classes: 4,
            jitter: 0.5,
            vocab: 8,
            input_len: 96,
            horizon: 24,
            n_harm: 8,
            epochs: 1,
            data_path: None,
            time_column: None,
            value_columns: Vec::new(),
            trials: 200,
            noise_sigma: 1e-3,
            sigma: 1.0,
            delta: 0.05,
            a_max: 1.0,
            b_max: 0.1,
            r_rank: 16,
            sample_multiplier: 2.0,
            lengths: vec![1024, 2048, 3072, 4096],
            warmup_steps: 5,
            timed_steps: 20,
            memory_budget: 4_000_000_000,
            noise_levels: vec![0.0, 2.0, 4.0, 8.0],
            replicates: 5,
            sweep_param: "fold".into(),
            sweep_values: vec![1, 2, 4, 8],
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| HarnessError::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "task" => self.task = parse(key, v)?,
            "model" => self.model = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "fold" => self.fold = parse(key, v)?,
            "s1" => self.s1 = parse(key, v)?,
            "s2" => self.s2 = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "combine_scale" => self.combine_scale = parse(key, v)?,
            "ffn" => self.ffn = parse(key, v)?,
            "fourier_conv" => self.fourier_conv = parse(key, v)?,
            "conv_stem" => self.conv_stem = parse(key, v)?,
            "seq_branch" => self.seq_branch = parse(key, v)?,
            "feat_branch" => self.feat_branch = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "eval_batches" => self.eval_batches = parse(key, v)?,
            "dropout_embed" => self.dropout_embed = parse(key, v)?,
            "dropout_attn" => self.dropout_attn = parse(key, v)?,
            "dropout_smoother" => self.dropout_smoother = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "noise_level" => self.noise_level = parse(key, v)?,
            "d_in" => self.d_in = parse(key, v)?,
            "rank" => self.rank = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "jitter" => self.jitter = parse(key, v)?,
            "vocab" => self.vocab = parse(key, v)?,
            "input_len" => self.input_len = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "n_harm" => self.n_harm = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "data_path" => self.data_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "time_column" => self.time_column = (!v.is_empty()).then(|| v.to_string()),
            "value_columns" => self.value_columns = parse_list(key, v)?,
            "trials" => self.trials = parse(key, v)?,
            "noise_sigma" => self.noise_sigma = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "a_max" => self.a_max = parse(key, v)?,
            "b_max" => self.b_max = parse(key, v)?,
            "r_rank" => self.r_rank = parse(key, v)?,
            "sample_multiplier" => self.sample_multiplier = parse(key, v)?,
            "lengths" => self.lengths = parse_list(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "timed_steps" => self.timed_steps = parse(key, v)?,
            "memory_budget" => self.memory_budget = parse(key, v)?,
            "noise_levels" => self.noise_levels = parse_list(key, v)?,
            "replicates" => self.replicates = parse(key, v)?,
            "sweep_param" => self.sweep_param = v.to_string(),
            "sweep_values" => self.sweep_values = parse_list(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Canonical `key = value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        let opt = |p: &Option<String>| p.clone().unwrap_or_default();
        let fields: Vec<(&str, String)> = vec![
            ("task", self.task.name().into()),
            ("model", self.model.name().into()),
            ("n", self.n.to_string()),
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("fold", self.fold.to_string()),
            ("s1", self.s1.to_string()),
            ("s2", self.s2.to_string()),
            ("layers", self.layers.to_string()),
            ("combine_scale", self.combine_scale.to_string()),
            ("ffn", self.ffn.to_string()),
            ("fourier_conv", self.fourier_conv.to_string()),
            ("conv_stem", self.conv_stem.to_string()),
            ("seq_branch", self.seq_branch.to_string()),
            ("feat_branch", self.feat_branch.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("eval_batches", self.eval_batches.to_string()),
            ("dropout_embed", self.dropout_embed.to_string()),
            ("dropout_attn", self.dropout_attn.to_string()),
            ("dropout_smoother", self.dropout_smoother.to_string()),
            ("seed", self.seed.to_string()),
            ("noise_level", self.noise_level.to_string()),
            ("d_in", self.d_in.to_string()),
            ("rank", self.rank.to_string()),
            ("classes", self.classes.to_string()),
            ("jitter", self.jitter.to_string()),
            ("vocab", self.vocab.to_string()),
            ("input_len", self.input_len.to_string()),
            ("horizon", self.horizon.to_string()),
            ("n_harm", self.n_harm.to_string()),
            ("epochs", self.epochs.to_string()),
            (
                "data_path",
                self.data_path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("time_column", opt(&self.time_column)),
            ("value_columns", self.value_columns.join(",")),
            ("trials", self.trials.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("sigma", self.sigma.to_string()),
            ("delta", self.delta.to_string()),
            ("a_max", self.a_max.to_string()),
            ("b_max", self.b_max.to_string()),
            ("r_rank", self.r_rank.to_string()),
            ("sample_multiplier", self.sample_multiplier.to_string()),
            ("lengths", join(&self.lengths)),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("timed_steps", self.timed_steps.to_string()),
            ("memory_budget", self.memory_budget.to_string()),
            ("noise_levels", join(&self.noise_levels)),
            ("replicates", self.replicates.to_string()),
            ("sweep_param", self.sweep_param.clone()),
            ("sweep_values", join(&self.sweep_values)),
            ("output_dir", self.output_dir.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in fields {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`to_kv`](Self::to_kv).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Architecture and probability constraints shared by every model task.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.n == 0 || self.d == 0 || self.heads == 0 || self.layers == 0 || self.batch_size == 0 {
            return err("n, d, heads, layers and batch_size must be positive".into());
        }
        if !self.d.is_multiple_of(self.heads) {
            return err(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.fold == 0 || !self.d.is_multiple_of(self.fold) {
            return err(format!("d = {} is not divisible by fold = {}", self.d, self.fold));
        }
        if self.s1 == 0 || self.s2 == 0 {
            return err("s1 and s2 must be positive".into());
        }
        for (name, p) in [
            ("dropout_embed", self.dropout_embed),
            ("dropout_attn", self.dropout_attn),
            ("dropout_smoother", self.dropout_smoother),
        ] {
            if !(0.0..1.0).contains(&p) {
                return err(format!("{name} = {p} outside [0, 1)"));
            }
        }
        if !self.seq_branch && !self.feat_branch {
            return err("at least one attention branch must be kept".into());
        }
        if self.noise_level < 0.0 || self.lr < 0.0 || self.weight_decay < 0.0 {
            return err("noise_level, lr and weight_decay must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("lengths", "64, 128").unwrap();
        cfg.set("time_column", "date").unwrap();
        cfg.set("value_columns", "a,b").unwrap();
        cfg.set("noise_levels", "0,8").unwrap();
        let back = ExperimentConfig::parse_str(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 16);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(ExperimentConfig::parse_str("nn = 3").is_err());
        assert!(ExperimentConfig::parse_str("n 3").is_err());
        assert!(ExperimentConfig::parse_str("n = -3").is_err());
        let cfg = ExperimentConfig::parse_str("# comment\n\nd = 30\nheads = 4\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
