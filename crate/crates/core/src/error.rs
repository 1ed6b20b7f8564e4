use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (unknown layer, mismatched vocabularies, missing provider).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-supplied argument violates an operation precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A requested item is not present in a store or registry.
    #[error("not found: {0}")]
    Lookup(String),

    /// A file or record does not match its expected format.
    #[error("format error in {location}: {message}")]
    Format { location: String, message: String },

    /// Feature extraction failed for an input image.
    #[error("encoder error: {0}")]
    Encoder(String),

    /// Training diverged or otherwise could not proceed.
    #[error("training error: {0}")]
    Training(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Argument(msg()))
    }
}
