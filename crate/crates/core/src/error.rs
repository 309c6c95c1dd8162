use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pixel value {value} at flat index {index} is outside [0, 1]; was the source normalized?")]
    PixelOutOfRange { index: usize, value: f32 },

    #[error("label {label} is out of range for {n_classes} classes")]
    LabelOutOfRange { label: u32, n_classes: u32 },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not enough images: requested {requested}, only {available} available in classes {classes:?}")]
    InsufficientImages {
        requested: usize,
        available: usize,
        classes: Vec<u32>,
    },

    #[error("dataset file {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("unknown layer id `{requested}`; valid ids: {valid:?}")]
    UnknownLayer {
        requested: String,
        valid: Vec<String>,
    },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("run with seed {seed} failed: {source}")]
    SeedFailed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("no results match the selection: {0}")]
    NoResults(String),

    #[error("plot: {0}")]
    Plot(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by the caller's input (bad ids, missing files,
    /// malformed configs) rather than by a runtime fault.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::UnknownExperiment(_)
            | Error::InvalidArgument(_)
            | Error::Dataset { .. }
            | Error::NoResults(_)
            | Error::UnknownLayer { .. }
            | Error::Json(_) => true,
            Error::SeedFailed { source, .. } => source.is_user_error(),
            _ => false,
        }
    }
}
