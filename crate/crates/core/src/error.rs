use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at epoch {epoch}; first non-finite gradient in `{param}`")]
    NonFiniteLoss {
        epoch: usize,
        loss: f64,
        param: String,
    },

    #[error("function is not deterministic: value drifted from {first} to {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("malformed PGM: {0}")]
    Pgm(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
