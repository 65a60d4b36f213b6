use thiserror::Error;

use crate::analysis::TargetCheck;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum MaqaError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Corrupt { path: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("duplicate id {id}")]
    DuplicateId { id: String },

    #[error("unknown passage id {0}")]
    UnknownPassage(u64),

    #[error("gold answer set is empty; metric undefined")]
    EmptyGold,

    #[error("question ids do not align: missing {missing:?}, unexpected {extra:?}")]
    IdMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("non-finite logit: ({logit_right}, {logit_wrong})")]
    NonFiniteLogit { logit_right: f64, logit_wrong: f64 },

    #[error("{kind} backend failed: {message}")]
    Backend { kind: &'static str, message: String },

    #[error("service request to {url} failed after {attempts} attempt(s): {message}")]
    Service {
        url: String,
        attempts: u32,
        message: String,
    },

    #[error("not an attack target: {0}")]
    NotAttackTarget(TargetCheck),

    #[error("not enough non-covering replacement passages: need {needed}, have {available}")]
    ReplacementPoolExhausted { needed: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, MaqaError>;

impl MaqaError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MaqaError::InvalidArgument(msg.into())
    }

    pub fn backend(kind: &'static str, msg: impl Into<String>) -> Self {
        MaqaError::Backend {
            kind,
            message: msg.into(),
        }
    }
}
