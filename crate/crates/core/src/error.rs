use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate vector in {op}: norm below {eps:e}")]
    DegenerateVector { op: &'static str, eps: f64 },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("lookup error in field `{field}`: id {id} out of range for vocabulary of {vocab}")]
    Lookup { field: String, id: usize, vocab: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error in field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NanGradient(String),

    #[error("checkpoint tensor `{tensor}`: {message}")]
    Checkpoint { tensor: String, message: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Checkpoint { .. } | Error::Contract(_) | Error::State(_) => ErrorClass::Usage,
            Error::Lookup { .. }
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::UndefinedMetric(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Dimension { .. } => ErrorClass::Data,
            Error::DegenerateVector { .. } | Error::NonFinite { .. } | Error::NanGradient(_) => ErrorClass::Numerical,
        }
    }
}
