use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite sample coordinate {0:?}")]
    NonFiniteCoordinate([f64; 3]),
    #[error("expected {expected} scene parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("parameter {index} = {value} is outside its range [{lo}, {hi}]")]
    ParamOutOfRange {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid bounding box: {0}")]
    InvalidAabb(String),
    #[error("cannot shrink grid resolution from {old:?} to {new:?}")]
    ResolutionShrink { old: [usize; 3], new: [usize; 3] },
    #[error("decoder input width {got} does not match expected {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("view direction is not unit length (|d| = {0})")]
    NonUnitDirection(f64),
    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { term: String, iteration: usize },
    #[error("image dimensions differ: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("image of {width}x{height} is smaller than the {min}x{min} SSIM window")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("empty ray pool: no training ray intersects the bounding box")]
    EmptyRayPool,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
