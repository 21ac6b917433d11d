//! Error taxonomy shared by every module.
//!
//! Each variant belongs to one of four categories (config, data, numeric,
//! internal) which the command line maps onto distinct exit codes.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid document `{doc_id}`: {message}")]
    Validation { doc_id: String, message: String },

    #[error("document `{doc_id}` has {len} tokens, exceeding the maximum of {max}")]
    Truncation {
        doc_id: String,
        len: usize,
        max: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("sampling exhausted after {attempts} attempts: {message}")]
    SamplingExhausted { attempts: usize, message: String },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("degenerate localized attention (sum {sum:e})")]
    DegenerateAttention { sum: f64 },

    #[error("adversarial gradient norm {norm:e} is too small to normalize")]
    ZeroGradient { norm: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

/// Coarse grouping used for exit codes and log prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Internal,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 1,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Internal => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Internal => "internal",
        }
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Truncation { .. }
            | Error::Input(_)
            | Error::SamplingExhausted { .. } => ErrorCategory::Data,
            Error::NonFinite { .. } | Error::DegenerateAttention { .. } | Error::ZeroGradient { .. } => {
                ErrorCategory::Numeric
            }
            // a missing file is almost always a bad path in the invocation
            Error::Io { .. } => ErrorCategory::Config,
            Error::Internal(_) => ErrorCategory::Internal,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(doc_id: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            doc_id: doc_id.to_string(),
            message: message.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}
