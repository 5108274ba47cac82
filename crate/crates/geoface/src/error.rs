use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),

    #[error("no clips found under {0}")]
    NoClips(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("geometry backend: {0}")]
    Geometry(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("empty driving sequence")]
    EmptyDriving,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than a failure while working.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::MissingRoot(_) | Self::Config(_) | Self::EmptyDriving | Self::Shape(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
