use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("data length {actual} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("shape {0:?} has a zero-sized dimension")]
    ZeroDimension(Vec<usize>),

    #[error("{op}: output size ({size} + 2*{padding} - {kernel}) is not divisible by stride {stride}")]
    NonIntegralOutput {
        op: &'static str,
        size: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
    },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any tensor that requires a gradient")]
    DetachedLoss,

    #[error("backward already ran on this tape; reset it before reuse")]
    TapeConsumed,

    #[error("variables from different tapes cannot be combined")]
    ForeignVar,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
