//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

/// Errors produced by any scatterdense component.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad parameter values, unknown config keys,
    /// non-power-of-two extents, mismatched shapes.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed or missing input data (images, checkpoints, datasets).
    #[error("data error: {0}")]
    Data(String),

    /// Training or evaluation produced non-finite values.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// Filesystem failure while reading or writing `path`.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code contract: 0 success, 2 config error, 3 data error,
    /// 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Divergence(_) => 4,
        }
    }
}
