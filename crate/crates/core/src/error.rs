use std::path::PathBuf;

use crate::geometry::Axis;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("transform is not decomposable: diagonal entry on the {0} axis is ~0")]
    NonDecomposable(Axis),

    #[error("singular transform (|det| = {det:e})")]
    SingularTransform { det: f64 },

    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("mask has no foreground voxels")]
    EmptyMask,

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no correspondences: total inner match weight {0:e} is ~0")]
    NoCorrespondence(f64),

    #[error("singular normal equations in affine update")]
    SingularSystem,

    #[error("point cloud `{label}` has {count} points, need at least {min}")]
    InsufficientPoints { label: String, count: usize, min: usize },

    #[error("invalid phantom spec: {0}")]
    Spec(String),

    #[error("unknown loss id `{0}`")]
    UnknownLoss(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("image too small: {0}")]
    ImageTooSmall(String),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
