use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the matching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),

    #[error("undefined Sampson distance: point lies at both epipoles")]
    UndefinedDistance,

    #[error("homography estimation failed: {0}")]
    EstimationFailure(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no ground-truth correspondences available for the oracle")]
    EmptyOracle,

    #[error("degenerate warp after {attempts} attempts")]
    DegenerateWarp { attempts: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}; batch dumped to {dump}")]
    NanLoss { step: usize, dump: PathBuf },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegeneratePose(_) => "degenerate_pose",
            Error::UndefinedDistance => "undefined_distance",
            Error::EstimationFailure(_) => "estimation_failure",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::EmptyOracle => "empty_oracle",
            Error::DegenerateWarp { .. } => "degenerate_warp",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::NanLoss { .. } => "nan_loss",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
