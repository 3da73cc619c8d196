//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A raw annotation value that the active codec does not declare.
    #[error("undeclared raw annotation value {value:?} at pixel (x={x}, y={y})")]
    Decode { value: [u8; 3], x: usize, y: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("not enough frames: scene has {frames}, window needs {window}")]
    EmptyTensor { frames: usize, window: usize },

    #[error("insufficient features: {found} correspondences, at least {required} required")]
    InsufficientFeatures { found: usize, required: usize },

    #[error("homography estimation failed: {0}")]
    Estimation(String),

    #[error("matrix is not invertible")]
    Singular,

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("pretrained import failed for layer {layer}: {reason}")]
    Import { layer: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
