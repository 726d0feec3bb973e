//! Synthetic task generators.
//!
//! Every generator keeps its fixed structure (class templates) drawn once
//! from its own stream; batches are drawn from a caller-provided stream so
//! a batch is a pure function of `(task, seed, batch index)`.

use s3attn_numerics::linalg::{matmul_t, random_orthonormal};
use s3attn_numerics::{RngState, Tensor};

use crate::config::{ExperimentConfig, Task};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// One label per sample.
    Classes(Vec<usize>),
    /// Row-major `[B, positions.len()]` labels at the listed positions.
    Sequence { positions: Vec<usize>, labels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    /// `[B, n, d_in]` features (one-hot for token tasks).
    pub inputs: Tensor,
    pub targets: Targets,
    pub noise_level: f64,
}

/// Adds independent `U(-a, a)` noise to every entry. `a = 0` leaves `x`
/// untouched and consumes no randomness.
pub fn add_uniform_noise(x: &mut Tensor, a: f64, rng: &mut RngState) {
    if a == 0.0 {
        return;
    }
    for v in x.data_mut() {
        *v += rng.uniform_range(-a, a);
    }
}

/// Classes defined by fixed low-rank `n×d_in` templates.
#[derive(Debug, Clone)]
pub struct LowrankClassify {
    pub templates: Vec<Tensor>,
    pub jitter: f64,
    pub noise_level: f64,
}

impl LowrankClassify {
    /// Template `c` is `√(n·d_in/rank)·W_c·V_cᵀ` with Haar-random
    /// orthonormal factors, so entries have unit mean square.
    pub fn new(
        n: usize,
        d_in: usize,
        rank: usize,
        classes: usize,
        jitter: f64,
        noise_level: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        if rank == 0 || rank > n.min(d_in) || classes < 2 {
            return Err(HarnessError::Config(format!(
                "lowrank_classify needs 1 ≤ rank ≤ min(n, d_in) and at least 2 classes (rank {rank}, n {n}, d_in {d_in}, classes {classes})"
            )));
        }
        let scale = (n as f64 * d_in as f64 / rank as f64).sqrt();
        let templates = (0..classes)
            .map(|_| {
                let w = random_orthonormal(n, rank, rng);
                let v = random_orthonormal(d_in, rank, rng);
                Ok(matmul_t(&w, &v, false, true)?.scale(scale))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            templates,
            jitter,
            noise_level,
        })
    }

    pub fn classes(&self) -> usize {
        self.templates.len()
    }

    pub fn batch(&self, batch_size: usize, rng: &mut RngState) -> TaskBatch {
        let shape = self.templates[0].shape();
        let (n, d_in) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(batch_size * n * d_in);
        let mut labels = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let c = rng.below(self.classes() as u64) as usize;
            labels.push(c);
            data.extend(self.templates[c].data().iter().map(|&t| t + self.jitter * rng.normal()));
        }
        let mut inputs = Tensor::new(&[batch_size, n, d_in], data).expect("shape");
        add_uniform_noise(&mut inputs, self.noise_level, rng);
        TaskBatch {
            inputs,
            targets: Targets::Classes(labels),
            noise_level: self.noise_level,
        }
    }

    /// Index of the template nearest in Frobenius norm to each sample.
    pub fn nearest_template(&self, inputs: &Tensor) -> Vec<usize> {
        let per = self.templates[0].numel();
        inputs
            .data()
            .chunks(per)
            .map(|x| {
                let dist = |t: &Tensor| x.iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                (0..self.classes())
                    .min_by(|&i, &j| dist(&self.templates[i]).total_cmp(&dist(&self.templates[j])))
                    .expect("at least two classes")
            })
            .collect()
    }
}

/// Reproduce the first half of a token sequence in its second half.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopyTask {
    pub n: usize,
    pub vocab: usize,
    pub noise_level: f64,
}

impl CopyTask {
    pub fn new(n: usize, vocab: usize, noise_level: f64) -> Result<Self> {
        if n < 2 || !n.is_multiple_of(2) || vocab == 0 {
            return Err(HarnessError::Config(format!(
                "copy task needs an even n ≥ 2 and vocab ≥ 1 (n {n}, vocab {vocab})"
            )));
        }
        Ok(Self { n, vocab, noise_level })
    }

    /// Input width: one slot per token plus the blank marker.
    pub fn d_in(&self) -> usize {
        self.vocab + 1
    }

    pub fn tokens(&self, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
        (0..batch_size)
            .map(|_| (0..self.n / 2).map(|_| rng.below(self.vocab as u64) as usize).collect())
            .collect()
    }

    /// One-hot batch for explicit first-half tokens; the second half holds
    /// the blank marker.
    pub fn encode(&self, tokens: &[Vec<usize>]) -> TaskBatch {
        let (n, half, w) = (self.n, self.n / 2, self.d_in());
        let mut inputs = Tensor::zeros(&[tokens.len(), n, w]);
        let mut labels = Vec::with_capacity(tokens.len() * half);
        for (b, seq) in tokens.iter().enumerate() {
            let slots = seq[..half].iter().copied().chain(std::iter::repeat(self.vocab));
            for (t, slot) in slots.take(n).enumerate() {
                inputs.set(&[b, t, slot], 1.0);
            }
            labels.extend_from_slice(seq);
        }
        TaskBatch {
            inputs,
            targets: Targets::Sequence {
                positions: (half..n).collect(),
                labels,
            },
            noise_level: self.noise_level,
        }
    }

    pub fn batch(&self, batch_size: usize, rng: &mut RngState) -> TaskBatch {
        let tokens = self.tokens(batch_size, rng);
        let mut batch = self.encode(&tokens);
        add_uniform_noise(&mut batch.inputs, self.noise_level, rng);
        batch
    }

    /// Cross-entropy of a uniform guess.
    pub fn entropy_floor(&self) -> f64 {
        (self.vocab as f64).ln()
    }
}

/// Smooth low-frequency class patterns standing in for images.
#[derive(Debug, Clone)]
pub struct NoisyImageLike {
    pub templates: Vec<Tensor>,
    pub jitter: f64,
    pub noise_level: f64,
}

/// Highest frequency present in an image-like template.
pub const IMAGE_MAX_FREQ: usize = 3;

impl NoisyImageLike {
    /// Each template channel is a sum of cosines at frequencies
    /// `1..=IMAGE_MAX_FREQ` with Gaussian amplitudes and uniform phases.
    pub fn new(
        n: usize,
        d_in: usize,
        classes: usize,
        jitter: f64,
        noise_level: f64,
        rng: &mut RngState,
    ) -> Result<Self> {
        if n == 0 || d_in == 0 || classes < 2 {
            return Err(HarnessError::Config(
                "noisy_image_like needs positive n and d_in and at least 2 classes".into(),
            ));
        }
        let amp = 1.0 / (IMAGE_MAX_FREQ as f64 / 2.0).sqrt();
        let templates = (0..classes)
            .map(|_| {
                let waves: Vec<(f64, f64)> = (0..d_in * IMAGE_MAX_FREQ)
                    .map(|_| (amp * rng.normal(), rng.uniform_range(0.0, std::f64::consts::TAU)))
                    .collect();
                Tensor::from_fn(&[n, d_in], |f| {
                    let (t, j) = (f / d_in, f % d_in);
                    (0..IMAGE_MAX_FREQ)
                        .map(|k| {
                            let (a, phase) = waves[j * IMAGE_MAX_FREQ + k];
                            let omega = std::f64::consts::TAU * (k + 1) as f64 / n as f64;
                            a * (omega * t as f64 + phase).cos()
                        })
                        .sum()
                })
            })
            .collect();
        Ok(Self {
            templates,
            jitter,
            noise_level,
        })
    }

    pub fn batch(&self, batch_size: usize, rng: &mut RngState) -> TaskBatch {
        let lowrank = LowrankClassify {
            templates: self.templates.clone(),
            jitter: self.jitter,
            noise_level: self.noise_level,
        };
        lowrank.batch(batch_size, rng)
    }
}

/// Any trainable synthetic task.
#[derive(Debug, Clone)]
pub enum SyntheticTask {
    Lowrank(LowrankClassify),
    Copy(CopyTask),
    Image(NoisyImageLike),
}

impl SyntheticTask {
    /// Builds the task selected by `cfg`, drawing fixed structure from `rng`.
    pub fn from_config(cfg: &ExperimentConfig, rng: &mut RngState) -> Result<Self> {
        Ok(match cfg.task {
            Task::LowrankClassify => SyntheticTask::Lowrank(LowrankClassify::new(
                cfg.n,
                cfg.d_in,
                cfg.rank,
                cfg.classes,
                cfg.jitter,
                cfg.noise_level,
                rng,
            )?),
            Task::Copy => SyntheticTask::Copy(CopyTask::new(cfg.n, cfg.vocab, cfg.noise_level)?),
            Task::NoisyImageLike => SyntheticTask::Image(NoisyImageLike::new(
                cfg.n,
                cfg.d_in,
                cfg.classes,
                cfg.jitter,
                cfg.noise_level,
                rng,
            )?),
            other => {
                return Err(HarnessError::Config(format!(
                    "task {} is not a training task",
                    other.name()
                )))
            }
        })
    }

    pub fn d_in(&self) -> usize {
        match self {
            SyntheticTask::Lowrank(t) => t.templates[0].shape()[1],
            SyntheticTask::Image(t) => t.templates[0].shape()[1],
            SyntheticTask::Copy(t) => t.d_in(),
        }
    }

    /// Number of output classes per prediction.
    pub fn outputs(&self) -> usize {
        match self {
            SyntheticTask::Lowrank(t) => t.classes(),
            SyntheticTask::Image(t) => t.templates.len(),
            SyntheticTask::Copy(t) => t.vocab,
        }
    }

    pub fn is_sequence(&self) -> bool {
        matches!(self, SyntheticTask::Copy(_))
    }

    pub fn batch(&self, batch_size: usize, rng: &mut RngState) -> TaskBatch {
        match self {
            SyntheticTask::Lowrank(t) => t.batch(batch_size, rng),
            SyntheticTask::Copy(t) => t.batch(batch_size, rng),
            SyntheticTask::Image(t) => t.batch(batch_size, rng),
        }
    }
}
