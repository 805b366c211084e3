use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coarse box needs a square image, got {width}x{height}")]
    NonSquareImage { width: usize, height: usize },
    #[error("bbox rate {0} <= 0.5 collapses or inverts the box")]
    DegenerateBox(f64),
    #[error("bbox rate {0} outside (0.5, 1.0]")]
    InvalidRate(f64),
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("box coordinate outside the {size}x{size} frame: {coords:?}")]
    OutOfFrame { coords: [f64; 4], size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("high-frequency cutoff tau {0} outside (0, 1)")]
    InvalidTau(f64),
    #[error("feature grid {0} is smaller than the 8x8 pyramid level")]
    GridTooSmall(usize),
    #[error("non-finite value in selector input")]
    NonFiniteInput,
    #[error("degenerate intensity range: lo == hi == {0}")]
    DegenerateRange(f64),
    #[error("need {needed} groups, only {available} available")]
    NotEnoughData { needed: usize, available: usize },
    #[error("invalid ablation combination: {0}")]
    InvalidCombination(String),
    #[error("frozen encoder parameters changed during training ({before} -> {after})")]
    FrozenViolation { before: String, after: String },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("geometry mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    GeometryMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("nifti error: {0}")]
    Nifti(#[from] nifti::NiftiError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable identifier for the error class, used in machine-readable CLI output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::NonSquareImage { .. } => "NonSquareImage",
            Error::DegenerateBox(_) => "DegenerateBox",
            Error::InvalidRate(_) => "InvalidRate",
            Error::EmptyMask => "EmptyMask",
            Error::OutOfFrame { .. } => "OutOfFrame",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidTau(_) => "InvalidTau",
            Error::GridTooSmall(_) => "GridTooSmall",
            Error::NonFiniteInput => "NonFiniteInput",
            Error::DegenerateRange(_) => "DegenerateRange",
            Error::NotEnoughData { .. } => "NotEnoughData",
            Error::InvalidCombination(_) => "InvalidCombination",
            Error::FrozenViolation { .. } => "FrozenViolation",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::FileNotFound(_) => "FileNotFound",
            Error::GeometryMismatch { .. } => "GeometryMismatch",
            Error::Checkpoint(_) => "CheckpointFormat",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
            Error::Image(_) => "ImageError",
            Error::Nifti(_) => "NiftiError",
            Error::Csv(_) => "CsvError",
        }
    }
}
