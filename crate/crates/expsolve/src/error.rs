use thiserror::Error;

/// Errors produced by accumulation, solving, training, and the data pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sample {index}: feature dimension {got} does not match expected {expected}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },

    #[error("sample {index}: negative feature value {value} at dimension {dim}")]
    NegativeFeature {
        index: usize,
        dim: usize,
        value: f64,
    },

    #[error("sample {index}: target {target} out of range for {classes} classes")]
    TargetOutOfRange {
        index: usize,
        target: usize,
        classes: usize,
    },

    #[error("column {column} has zero mass: class was never observed")]
    EmptyColumn { column: usize },

    #[error("empty sample stream")]
    EmptyStream,

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
