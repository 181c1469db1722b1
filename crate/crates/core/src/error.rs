use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("no subjects found under {0}")]
    NoSubjects(PathBuf),

    #[error("subject {subject}: missing modality file(s): {}", missing.join(", "))]
    MissingModality { subject: String, missing: Vec<String> },

    #[error("subject {subject}: shape mismatch, {first_name} is {first:?} but {other_name} is {other:?}")]
    ShapeMismatch {
        subject: String,
        first_name: String,
        first: Vec<usize>,
        other_name: String,
        other: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint does not match configuration:\n{}", diffs.join("\n"))]
    CheckpointMismatch { diffs: Vec<String> },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("training diverged at epoch {epoch} step {step} (loss {loss}); last good checkpoint: {}", last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
        last_good: Option<PathBuf>,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn nifti(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Nifti {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// True for errors caused by the data on disk rather than by the program.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Nifti { .. }
                | Error::Data(_)
                | Error::NoSubjects(_)
                | Error::MissingModality { .. }
                | Error::ShapeMismatch { .. }
                | Error::NonFinite(_)
                | Error::Checkpoint { .. }
                | Error::CheckpointMismatch { .. }
                | Error::Json(_)
        )
    }
}
