//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed PGM file: {0}")]
    PgmFormat(String),

    #[error("PNG error: {0}")]
    Png(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("rectangle ({x},{y}) {w}x{h} outside image {width}x{height}")]
    RectOutOfBounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },

    #[error("window ({x},{y}) size {size} outside image {width}x{height}")]
    WindowOutOfBounds {
        x: usize,
        y: usize,
        size: usize,
        width: usize,
        height: usize,
    },

    #[error("empty image")]
    EmptyImage,

    #[error("empty wavelet set")]
    EmptyWaveletSet,

    #[error("projected point at infinity (|w'| = {w_abs:.3e})")]
    DegenerateProjection { w_abs: f64 },

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("orientation undefined: coincident pair endpoints in group {group}")]
    CoincidentPair { group: char },

    #[error("training set contains a single class")]
    SingleClass,

    #[error("no weak learner with error < 0.5 in round {round} (best {best_error:.4})")]
    NoUsefulLearner { round: usize, best_error: f64 },

    #[error("pose maps template outside the {width}x{height} canvas")]
    PoseOutsideCanvas { width: usize, height: usize },

    #[error("unmatched record ids: {0:?}")]
    UnmatchedIds(Vec<String>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    InvalidInput(String),
}
