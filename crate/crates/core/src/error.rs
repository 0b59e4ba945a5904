//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the matching and pose estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Input does not carry enough geometric structure (rank-deficient
    /// covariance, zero weights, non-positive radius, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A point has non-positive depth in the camera frame.
    #[error("point {index} is behind the camera (z = {z})")]
    BehindCamera { index: usize, z: f64 },

    /// A sample count outside the valid range was requested.
    #[error("requested {requested} samples from {available} candidates")]
    InvalidCount { requested: usize, available: usize },

    /// The template bank holds no templates.
    #[error("template bank is empty")]
    EmptyBank,

    /// A patch embedding set required to be non-empty is empty.
    #[error("patch embedding set is empty")]
    EmptyPatches,

    /// A proposal record is missing its matching score.
    #[error("proposal {index} has not been scored")]
    UnscoredRecord { index: usize },

    /// Tensor or feature dimensions do not line up.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// Softmax temperature must be strictly positive.
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    /// Probability sharpening exponent must be strictly positive.
    #[error("sharpening exponent must be positive, got {0}")]
    InvalidExponent(f64),

    /// Every candidate pair is assigned to the background.
    #[error("all candidate pairs are assigned to the background")]
    AllBackground,

    /// Not enough usable correspondences to solve a pose.
    #[error("need at least {needed} correspondences, found {found}")]
    InsufficientCorrespondence { found: usize, needed: usize },

    /// Triplet resampling hit its retry cap without a non-degenerate draw.
    #[error("triplet resampling exhausted after {attempts} attempts")]
    RetryExhausted { attempts: usize },

    /// An empty hypothesis list was passed to pose selection.
    #[error("empty hypothesis list")]
    EmptyHypotheses,

    /// An index points outside its container.
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// The proposal carries fewer points than the pipeline minimum.
    #[error("proposal has {found} points, need at least {needed}")]
    TooFewPoints { found: usize, needed: usize },

    /// Point cloud descriptors are required but absent.
    #[error("point cloud has no descriptors")]
    MissingDescriptors,

    /// A tensor or manifest file failed to parse.
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
