use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure families. The CLI maps these onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Io,
    Dependency,
    Numeric,
    Network,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate slice: {0}")]
    Degenerate(String),
    #[error("expected a scalar, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("empty loss: {0}")]
    EmptyLoss(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("sequence of length {len} exceeds the limit of {max}")]
    Length { len: usize, max: usize },
    #[error("invalid model state: {0}")]
    State(String),
    #[error("wrong training stage: {0}")]
    Stage(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("optimizer consistency: {0}")]
    Consistency(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("checkpoint config mismatch: {}", .0.join("; "))]
    ConfigMismatch(Vec<String>),
    #[error("{0}")]
    Format(String),
    #[error("judge request failed: {0}")]
    Judge(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config { .. } | Error::ConfigMismatch(_) | Error::Template(_) => {
                ErrorCategory::Config
            }
            Error::Parse { .. } | Error::Format(_) | Error::Json(_) | Error::Csv(_) => {
                ErrorCategory::Data
            }
            Error::Io { .. } => ErrorCategory::Io,
            Error::Dependency(_) | Error::Stage(_) | Error::State(_) => ErrorCategory::Dependency,
            Error::Judge(_) => ErrorCategory::Network,
            _ => ErrorCategory::Numeric,
        }
    }
}
