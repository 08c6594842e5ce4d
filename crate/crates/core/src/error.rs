use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid label {label} (class count {class_count})")]
    InvalidLabel { label: u8, class_count: usize },
    #[error("source lightness histogram has all mass at zero")]
    DegenerateSource,
    #[error("gamma solver did not converge within {iterations} iterations (last step {last_step:e})")]
    NonConvergence { iterations: usize, last_step: f64 },
    #[error("image is {height}x{width}; at least 3x3 is required")]
    ImageTooSmall { height: usize, width: usize },
    #[error("requested {requested} correctly classified pixels, only {available} available")]
    InsufficientCorrectPixels { requested: usize, available: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no class has any member pixel")]
    AllClassesAbsent,
    #[error("class {0} has no center")]
    ClassAbsent(usize),
    #[error("triplet loss needs at least two present classes")]
    SingleClass,
    #[error("warp geometry mismatch: {0}")]
    WarpMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
