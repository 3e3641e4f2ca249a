use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("class {0} has no boxes in this image")]
    MissingClass(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("undefined loss: {0}")]
    UndefinedLoss(String),

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::DegenerateBox(_) => "degenerate-box",
            Error::MissingClass(_) => "missing-class",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::NumericOverflow(_) => "numeric-overflow",
            Error::UndefinedLoss(_) => "undefined-loss",
            Error::UndefinedRatio(_) => "undefined-ratio",
            Error::Divergence(_) => "divergence",
            Error::Json(_) => "json",
        }
    }
}
