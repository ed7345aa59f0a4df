use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("insufficient support: {0}")]
    InsufficientSupport(String),

    #[error("empty class: {0}")]
    EmptyClass(&'static str),

    #[error("rda_gamma too small: weight norm {norm:.3e} exceeded {limit:.0e} at iteration {iteration}")]
    Diverged {
        norm: f64,
        limit: f64,
        iteration: usize,
    },

    #[error("malformed record at {path}:{line}: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing image: {0}")]
    MissingImage(PathBuf),

    #[error("bounding box {bbox:?} of {path} exceeds image bounds {width}x{height}")]
    BoxOutOfBounds {
        path: PathBuf,
        bbox: [i64; 4],
        width: u32,
        height: u32,
    },

    #[error("image decode error for {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("model container: {0}")]
    Container(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
