use std::io;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// A pose document could not be decoded or violates an invariant.
    #[error("pose document: {0}")]
    PoseFormat(String),

    #[error("frame {frame}, keypoint {keypoint}: {message}")]
    Keypoint {
        frame: usize,
        keypoint: usize,
        message: String,
    },

    #[error("frame {frame}: {message}")]
    Frame { frame: usize, message: String },

    #[error("image: {0}")]
    Image(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unretargetable frame{}: neck keypoint is missing", frame.map(|f| format!(" {f}")).unwrap_or_default())]
    Unretargetable { frame: Option<usize> },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by numerics rather than malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
