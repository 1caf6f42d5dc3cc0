use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an input value was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Crop box does not intersect the image.
    #[error("empty crop")]
    EmptyCrop,

    /// Dense descriptor patch larger than the source image.
    #[error("patch exceeds image")]
    PatchExceedsImage,

    /// Fewer points than requested clusters.
    #[error("too few points: {points} points for k = {k}")]
    TooFewPoints { points: usize, k: usize },

    /// Training corpus has no positive (skin) pixels.
    #[error("no positive pixels")]
    NoPositivePixels,

    /// SVM training set contains a single class.
    #[error("degenerate labels: only one class present")]
    DegenerateLabels,

    /// Hand mask contains no set bits.
    #[error("empty hand mask")]
    EmptyHandMask,

    /// Vector/image dimensions do not agree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A structured file failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Model file has the wrong magic string or an unsupported version.
    #[error("unsupported model format: {0}")]
    ModelFormat(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
