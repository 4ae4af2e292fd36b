use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, dimensions, or configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced NaN or infinity.
    #[error("numeric error in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("no samples")]
    NoSamples,

    #[error("undefined variance: need at least 2 samples, got {0}")]
    UndefinedVariance(usize),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the op name of a numeric error with the loss sub-term that produced it.
    pub fn within(self, term: &str) -> Self {
        match self {
            Error::Numeric { op, detail } => Error::Numeric {
                op: format!("{term}/{op}"),
                detail,
            },
            other => other,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::NoSamples | Error::UndefinedVariance(_) => 2,
            Error::Numeric { .. } => 3,
            Error::Io { .. } | Error::Checkpoint(_) => 4,
        }
    }
}
