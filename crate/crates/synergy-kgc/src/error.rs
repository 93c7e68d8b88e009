//! Error type shared across the crate, with process exit-code mapping.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KgcError>;

#[derive(Debug, Error)]
pub enum KgcError {
    /// Bad invocation: unknown flags, missing arguments, contradictory options.
    #[error("usage error: {0}")]
    Usage(String),

    /// I/O failure tagged with the path that produced it.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or inconsistent input data (triple files, descriptions,
    /// imported embeddings, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration values or combinations.
    #[error("config error: {0}")]
    Config(String),

    /// Dimension mismatch when recording a tape operation.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// Non-finite loss, gradient, or parameter value.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl KgcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KgcError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for batch runs: 1 usage, 2 data/config, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            KgcError::Usage(_) => 1,
            KgcError::Io { .. } | KgcError::Data(_) | KgcError::Config(_) => 2,
            KgcError::Shape { .. } | KgcError::Numeric(_) => 3,
        }
    }
}
