use std::path::PathBuf;

use crate::gateway::GatewayError;
use crate::profile::ProfileError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("every search query failed: {0}")]
    SearchUnavailable(String),
    #[error("no code generation strategy produced a usable candidate")]
    MultiPathExhausted,
    #[error("sandbox unavailable: {0}")]
    Sandbox(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error must abort a run rather than degrade one stage.
    pub fn is_fatal(&self) -> bool {
        match self {
            Error::Gateway(e) => e.is_fatal(),
            Error::SearchUnavailable(_) | Error::MultiPathExhausted => false,
            _ => true,
        }
    }
}

/// Separates fatal gateway errors, which propagate, from recoverable ones,
/// which the calling agent turns into a flagged fallback.
pub(crate) fn split_fatal<T>(result: Result<T, GatewayError>) -> Result<Result<T, GatewayError>, Error> {
    match result {
        Err(e) if e.is_fatal() => Err(Error::Gateway(e)),
        other => Ok(other),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
