use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("embedding not unit-normalized: norm {norm} deviates from 1 by more than {tol}")]
    NotNormalized { norm: f64, tol: f64 },

    #[error("no eligible negatives for anchor (all candidates excluded)")]
    NoEligibleNegatives,

    #[error("phantom layouts differ: {0} vs {1}")]
    LayoutMismatch(String, String),

    #[error(
        "non-finite loss at iteration {iteration} (batch seed {batch_seed}, images {images:?})"
    )]
    NonFiniteLoss {
        iteration: u64,
        batch_seed: u64,
        images: Vec<usize>,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short tag for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::NotNormalized { .. } => "not_normalized",
            Error::NoEligibleNegatives => "no_eligible_negatives",
            Error::LayoutMismatch(..) => "layout_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Format { .. } => "format",
            Error::Empty(_) => "empty",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
