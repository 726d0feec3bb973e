//! Dense 64-bit tensors, real FFT, SVD-based linear algebra, neural-network
//! kernels and a reverse-mode differentiation tape.

pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod memory;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use fft::{irfft, rfft, ComplexSpectrum};
pub use gradcheck::{grad_check, GradCheckReport, Probe};
pub use graph::{Graph, Var};
pub use kernels::{Mode, RunningStats};
pub use linalg::{matmul, pinv, spectral_norm, svd, Svd};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use rng::RngState;
pub use tensor::Tensor;
