use s3attn_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{op}: {msg}")]
    Param { op: &'static str, msg: String },
    #[error("line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("missing values in data rows {rows:?}")]
    MissingValues { rows: Vec<usize> },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn param_err(op: &'static str, msg: impl Into<String>) -> CoreError {
    CoreError::Param { op, msg: msg.into() }
}
