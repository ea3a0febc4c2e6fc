//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar argument is out of its valid range.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A 3D point ended up at or behind the camera plane.
    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },

    /// A config file or flag combination is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A binary or text artifact does not match its documented layout.
    #[error("format error: {0}")]
    Format(String),

    /// Loss evaluation had no supervised elements to average over.
    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
