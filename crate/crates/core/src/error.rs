use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DfrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DfrError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("no supervised positions")]
    EmptyMask,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("placeholder error: {0}")]
    Placeholder(String),
    #[error("region {0} not found in the embedding store")]
    MissingRegion(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DfrError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DfrError::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        DfrError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        DfrError::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// Process exit status used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            DfrError::Config(_) => 2,
            DfrError::Integrity(_) => 3,
            DfrError::NonFinite { .. } | DfrError::Numeric(_) => 4,
            _ => 1,
        }
    }
}
