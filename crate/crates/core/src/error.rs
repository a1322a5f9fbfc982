use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileMissing(PathBuf),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("payload size mismatch: header declares {expected} voxels, payload holds {actual}")]
    PayloadMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("negative label {0} in mask")]
    NegativeLabel(i64),

    #[error("value {value} at index {index} outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("no fracture instances in volume {0}")]
    NoInstances(String),

    #[error("could not find a clean {region} negative for volume {volume_id} after {attempts} candidates")]
    NegativeSamplingFailed {
        volume_id: String,
        region: &'static str,
        attempts: usize,
    },

    #[error("centroid {centroid:?} outside volume of shape {shape:?}")]
    CentroidOutOfBounds { centroid: [i64; 3], shape: [usize; 3] },

    #[error("volume {0} referenced by plan is not available")]
    MissingVolume(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("sensitivity undefined: no ground-truth instances")]
    NoGroundTruth,

    #[error("phantom placement infeasible: {0}")]
    InfeasiblePhantom(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("nifti: {0}")]
    Nifti(#[from] nifti::NiftiError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::InvalidConfig(_)
                | Error::ShapeMismatch { .. }
                | Error::MalformedHeader { .. }
                | Error::PayloadMismatch { .. }
                | Error::FileMissing(_)
                | Error::NegativeLabel(_)
                | Error::OutOfRange { .. }
                | Error::MissingVolume(_)
                | Error::EmptyDataset
        )
    }
}
