use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    File(#[from] FileError),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Wraps an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

/// Failures reading or writing raw array files and text configs.
#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: payload is {actual} bytes, header implies {expected}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: unknown dtype `{dtype}`")]
    UnknownDtype { path: PathBuf, dtype: String },

    #[error("{path}: missing header sidecar")]
    MissingSidecar { path: PathBuf },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FileError {
    /// Process exit code used by the CLI for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            FileError::LengthMismatch { .. } => 3,
            FileError::UnknownDtype { .. } => 4,
            FileError::MissingSidecar { .. } => 5,
            FileError::Parse { .. } => 6,
            FileError::Io { .. } => 7,
        }
    }
}
