//! Seeded Adam training loop for the synthetic tasks.

use std::time::Instant;

use s3attn_core::{Ctx, Optimizer, ParamStore};
use s3attn_numerics::kernels::Mode;
use s3attn_numerics::{memory, AdamConfig, Graph, RngState, Tensor, Var};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::model::{ModelSpec, SequenceModel};
use crate::tasks::{SyntheticTask, Targets, TaskBatch};

/// Stream holding the task's fixed structure.
pub const TASK_STREAM: u64 = 0;
/// Stream for parameter initialization.
pub const INIT_STREAM: u64 = 1;
/// Training batch `s` comes from stream `TRAIN_STREAM + s`.
pub const TRAIN_STREAM: u64 = 1_000_000;
/// Held-out batch `i` comes from stream `EVAL_STREAM + i`.
pub const EVAL_STREAM: u64 = 2_000_000;
/// Dropout masks for step `s` come from stream `DROPOUT_STREAM + s`.
pub const DROPOUT_STREAM: u64 = 3_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Training loss at each step, indexed from 0.
    pub losses: Vec<f64>,
    /// Held-out accuracy in `[0, 1]` (per token for sequence targets).
    pub accuracy: f64,
    pub eval_loss: f64,
    /// Wall-clock training throughput; not reproducible across runs.
    pub steps_per_sec: f64,
    /// Peak bytes of live tensor payloads during training.
    pub peak_bytes: i64,
    pub config_hash: String,
    pub config: String,
    pub seed: u64,
}

/// Everything a run needs, built from a config.
pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub task: SyntheticTask,
    pub model: SequenceModel,
    pub store: ParamStore,
    pub optimizer: Optimizer,
    root: RngState,
}

fn labels(batch: &TaskBatch) -> &[usize] {
    match &batch.targets {
        Targets::Classes(l) => l,
        Targets::Sequence { labels, .. } => labels,
    }
}

fn positions(task: &SyntheticTask) -> Option<Vec<usize>> {
    match task {
        SyntheticTask::Copy(t) => Some((t.n / 2..t.n).collect()),
        _ => None,
    }
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let root = RngState::new(cfg.seed);
        let task = SyntheticTask::from_config(cfg, &mut root.split(TASK_STREAM))?;
        let spec = ModelSpec::from_config(cfg, task.d_in(), task.outputs(), positions(&task));
        let mut store = ParamStore::new();
        let model = SequenceModel::new(spec, cfg.n, &mut store, &mut root.split(INIT_STREAM))?;
        let optimizer = Optimizer::new(
            &store,
            AdamConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            cfg: cfg.clone(),
            task,
            model,
            store,
            optimizer,
            root,
        })
    }

    pub fn train_batch(&self, step: usize) -> TaskBatch {
        self.task
            .batch(self.cfg.batch_size, &mut self.root.split(TRAIN_STREAM + step as u64))
    }

    pub fn eval_batch(&self, index: usize) -> TaskBatch {
        self.task
            .batch(self.cfg.batch_size, &mut self.root.split(EVAL_STREAM + index as u64))
    }

    fn logits(&mut self, g: &mut Graph, inputs: &Tensor, mode: Mode, rng: &mut RngState) -> Result<(Var, Vec<Var>)> {
        let vars = self.store.bind(g);
        let mut ctx = Ctx::from_vars(g, vars.clone(), mode, rng);
        let x = ctx.g.constant(inputs.clone());
        let logits = self.model.forward(&mut ctx, x)?;
        Ok((logits, vars))
    }

    /// One optimizer step on training batch `step`; returns its loss.
    pub fn step(&mut self, step: usize) -> Result<f64> {
        let batch = self.train_batch(step);
        self.step_on(&batch, step)
    }

    /// Forward, backward and optimizer update on an explicit batch, with
    /// the dropout stream of `step`.
    pub fn step_on(&mut self, batch: &TaskBatch, step: usize) -> Result<f64> {
        let mut g = Graph::new();
        let mut rng = self.root.split(DROPOUT_STREAM + step as u64);
        let (logits, vars) = self.logits(&mut g, &batch.inputs, Mode::Train, &mut rng)?;
        let loss = g.cross_entropy(logits, labels(batch))?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(HarnessError::Diverged {
                step,
                config: self.cfg.to_kv(),
            });
        }
        g.backward(loss)?;
        self.optimizer.step(&mut self.store, &g, &vars)?;
        Ok(value)
    }

    /// Inference-mode loss and correct-prediction count on one batch.
    pub fn evaluate_batch(&mut self, batch: &TaskBatch) -> Result<(f64, usize, usize)> {
        let mut g = Graph::new();
        let mut rng = RngState::new(0);
        let (logits, _) = self.logits(&mut g, &batch.inputs, Mode::Infer, &mut rng)?;
        let labels = labels(batch);
        let loss = g.cross_entropy(logits, labels)?;
        let out = g.value(logits);
        let k = out.shape()[1];
        let correct = labels
            .iter()
            .enumerate()
            .filter(|&(r, &l)| {
                let row = &out.data()[r * k..(r + 1) * k];
                let best = (0..k).max_by(|&i, &j| row[i].total_cmp(&row[j])).expect("k ≥ 1");
                best == l
            })
            .count();
        Ok((g.value(loss).item(), correct, labels.len()))
    }

    /// Mean loss and accuracy over the held-out batches.
    pub fn evaluate(&mut self) -> Result<(f64, f64)> {
        let (mut loss, mut correct, mut total) = (0.0, 0, 0);
        let batches = self.cfg.eval_batches.max(1);
        for i in 0..batches {
            let batch = self.eval_batch(i);
            let (l, c, t) = self.evaluate_batch(&batch)?;
            loss += l;
            correct += c;
            total += t;
        }
        Ok((loss / batches as f64, correct as f64 / total as f64))
    }

    pub fn run(&mut self) -> Result<RunResult> {
        memory::reset_peak();
        let start = Instant::now();
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for step in 0..self.cfg.steps {
            losses.push(self.step(step)?);
        }
        let elapsed = start.elapsed().as_secs_f64();
        let peak_bytes = memory::peak_bytes();
        let (eval_loss, accuracy) = self.evaluate()?;
        Ok(RunResult {
            losses,
            accuracy,
            eval_loss,
            steps_per_sec: if elapsed > 0.0 {
                self.cfg.steps as f64 / elapsed
            } else {
                0.0
            },
            peak_bytes,
            config_hash: self.cfg.hash(),
            config: self.cfg.to_kv(),
            seed: self.cfg.seed,
        })
    }
}

/// Builds a trainer from `cfg` and runs it to completion.
pub fn train(cfg: &ExperimentConfig) -> Result<RunResult> {
    Trainer::new(cfg)?.run()
}
