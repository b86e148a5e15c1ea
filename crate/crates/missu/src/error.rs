//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // --- file formats ---
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("unsupported dtype code {0}")]
    BadDtype(u32),
    #[error("dimension overflow: {0}")]
    DimOverflow(String),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: u64, got: u64 },
    #[error("trailing data after payload ({0} extra bytes)")]
    TrailingData(u64),
    #[error("mask label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    // --- configuration ---
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint missing parameter group {0}")]
    MissingParamGroup(&'static str),
    #[error("checkpoint missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    // --- data pipeline ---
    #[error("phantom shape too small: each axis must be >= {min}, got {got:?}")]
    PhantomTooSmall { min: usize, got: (usize, usize, usize) },
    #[error("could not realize a phantom with all {classes} classes (seed {seed})")]
    PhantomDegenerate { classes: usize, seed: u64 },
    #[error("modality {modality} is degenerate for z-score: {reason}")]
    DegenerateModality { modality: usize, reason: String },
    #[error("crop size {crop:?} exceeds volume size {vol:?}")]
    CropTooLarge {
        crop: (usize, usize, usize),
        vol: (usize, usize, usize),
    },

    // --- model ---
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("multi-scale fusion is defined for stages 1..=3, got stage {0}")]
    UnsupportedStage(usize),

    // --- training / evaluation ---
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("total iterations must be >= 1")]
    ZeroIterations,
    #[error("non-finite loss at step {step}{detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("hausdorff distance is undefined: {0} region is empty")]
    EmptyRegion(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
