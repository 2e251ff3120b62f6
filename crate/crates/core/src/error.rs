use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data integrity error: {0}")]
    DataIntegrity(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error in {path}: {message} (line {line}, column {column})")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("numeric failure in {stage} at index {index}: {detail}")]
    NumericFailure {
        stage: String,
        index: usize,
        detail: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl GazeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(stage: impl Into<String>, index: usize, detail: impl Into<String>) -> Self {
        Self::NumericFailure {
            stage: stage.into(),
            index,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = GazeError> = std::result::Result<T, E>;
