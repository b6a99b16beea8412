use std::path::PathBuf;

use thiserror::Error;

use crate::datasets::Split;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("sample {sample_id}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        sample_id: String,
        label: usize,
        num_classes: usize,
    },

    #[error("duplicate sample_id {0:?}")]
    DuplicateSampleId(String),

    #[error("split {0} has no records")]
    EmptySplit(Split),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("conditioning mode mismatch: checkpoint is {expected}, got {got}")]
    ModeMismatch { expected: String, got: String },

    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{what} is not unit-normalized (norm {norm})")]
    NotNormalized { what: String, norm: f64 },

    #[error("sample {0} has no keypoints")]
    MissingKeypoints(String),

    #[error("sample {0} has no score")]
    Unscored(String),

    #[error("class count mismatch: expected {expected}, got {got}")]
    ClassCountMismatch { expected: usize, got: usize },

    #[error("training diverged at step {step}: {what} is NaN")]
    Diverged { step: usize, what: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("stage {stage} has stale outputs in {} (fingerprint {found}, expected {expected}); rerun with --force", dir.display())]
    StaleStage {
        stage: String,
        dir: PathBuf,
        found: String,
        expected: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Torch(#[from] tch::TchError),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

impl Error {
    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
