use std::path::PathBuf;

use thiserror::Error;

use crate::grid::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("box dimensions must be odd and positive, got {0}x{1}x{2}")]
    InvalidBox(usize, usize, usize),

    #[error("box {box_dims:?} is larger than the volume {volume_dims:?} along at least one axis")]
    BoxExceedsVolume {
        box_dims: [usize; 3],
        volume_dims: [usize; 3],
    },

    #[error("gaussian cloud is empty")]
    EmptyCloud,

    #[error("invalid gaussian cloud: {0}")]
    InvalidCloud(ValidationReport),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("dense evaluation needs {required} gaussian-voxel pairs, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        snapshot: Box<crate::grid::GaussianCloud>,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn mismatch(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::DimensionMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    /// True for errors caused by bad input or configuration rather than numerics or IO.
    pub fn is_config_error(&self) -> bool {
        !matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::Io(_) | Error::Json(_) | Error::Format { .. }
        )
    }
}
