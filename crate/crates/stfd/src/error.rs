use thiserror::Error;

/// Error type shared across the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed on-disk artifact (bad header, bad magic, truncation).
    #[error("format error: {0}")]
    Format(String),
    /// Well-formed container holding invalid data (NaN sample, overlapping events, ...).
    #[error("data error: {0}")]
    Data(String),
    /// Invalid configuration value or unknown config key.
    #[error("config error: {0}")]
    Config(String),
    /// Tensor/array dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),
    /// Training failed (divergence, empty corpus mid-run).
    #[error("training error: {0}")]
    Train(String),
    /// API misuse (backward on non-scalar, push after close, ...).
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for config/format/data problems,
    /// 3 for training failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Train(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
