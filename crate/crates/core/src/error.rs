use thiserror::Error;

/// Errors raised by the quantification library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("bounding box {min:?}-{max:?} does not fit volume dims {dims:?}")]
    BoxOutOfBounds {
        min: [usize; 3],
        max: [usize; 3],
        dims: [usize; 3],
    },

    #[error("malformed volume file: {0}")]
    MalformedFile(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("phantom generation failed: {0}")]
    Placement(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
