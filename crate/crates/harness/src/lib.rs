//! Configuration, synthetic tasks, training and the experiment drivers
//! behind the `s3attn` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod forecast_run;
pub mod model;
pub mod output;
pub mod props;
pub mod tasks;
pub mod train;

pub use config::{ExperimentConfig, ModelKind, Task};
pub use error::{HarnessError, Result};
pub use train::{train, RunResult, Trainer};
