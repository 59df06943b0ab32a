use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),

    #[error("configuration error: unknown key `{0}`")]
    UnknownKey(String),

    #[error("configuration error: cannot parse `{key}` value `{value}`: {reason}")]
    Parse {
        key: String,
        value: String,
        reason: String,
    },

    #[error("validation error: `{field}` {bound}")]
    Validation { field: &'static str, bound: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn validation(field: &'static str, bound: impl Into<String>) -> Self {
        Error::Validation {
            field,
            bound: bound.into(),
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::UnknownKey(_)
            | Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Shape(_)
            | Error::Invalid(_) => 3,
            Error::Io { .. } | Error::Load { .. } => 4,
        }
    }
}
