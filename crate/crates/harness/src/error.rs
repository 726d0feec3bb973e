use std::path::Path;

use s3attn_core::CoreError;
use s3attn_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("loss diverged at step {step}; config:\n{config}")]
    Diverged { step: usize, config: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 for configuration or input problems, 2 for
    /// numeric failures, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Format { .. } => 1,
            HarnessError::Io { .. } => 3,
            HarnessError::Core(CoreError::Io { .. }) | HarnessError::Numerics(NumericsError::Io { .. }) => 3,
            HarnessError::Core(CoreError::Parse { .. } | CoreError::MissingValues { .. }) => 1,
            HarnessError::Core(CoreError::Numerics(NumericsError::Io { .. })) => 3,
            HarnessError::Diverged { .. } | HarnessError::Core(_) | HarnessError::Numerics(_) => 2,
        }
    }
}
