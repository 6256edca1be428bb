use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed route: {0}")]
    MalformedRoute(String),
    #[error("cannot place scenario {kind}: {reason}")]
    Placement { kind: String, reason: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("unknown infraction kind `{0}`")]
    UnknownInfraction(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.to_string(),
        }
    }
}

impl Error {
    /// Process exit status: 1 for bad input, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Unavailable(_) | Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
