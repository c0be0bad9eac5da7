use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The variants are grouped by how a caller is expected to react: fix the
/// configuration, fix the input data, or give up on a numerically broken run.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("numeric error at step {step}: {source}")]
    NumericAtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("search space too large: {size} shapes exceeds cap {cap}")]
    SpaceTooLarge { size: u128, cap: u128 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("state error: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }

    /// Broad category used by front ends to pick an exit status.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidShape(_)
            | Error::Config(_)
            | Error::Validation(_)
            | Error::Contract(_)
            | Error::SpaceTooLarge { .. }
            | Error::State(_) => ErrorCategory::Usage,
            Error::Numeric { .. } | Error::NumericAtStep { .. } => ErrorCategory::Numeric,
            Error::Infeasible(_) => ErrorCategory::Infeasible,
            Error::EmptyBatch(_)
            | Error::Data(_)
            | Error::Format { .. }
            | Error::UnsupportedVersion { .. }
            | Error::UndefinedCorrelation(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorCategory::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
    Infeasible,
}
