use thiserror::Error;

/// Errors produced anywhere in the tracking stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive camera depth {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("affine map is singular (|det| = {det:e})")]
    SingularAffine { det: f64 },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: String, actual: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no model found after {iterations} RANSAC iterations")]
    NoModelFound { iterations: usize },
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("insufficient points: need {required}, have {actual}")]
    InsufficientPoints { required: usize, actual: usize },
    #[error("keypoint id mismatch: {0}")]
    IdMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch in record {record}")]
    Checksum { record: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
