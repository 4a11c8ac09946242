use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("conv2d output extent not exact: ({input}+2*{padding}-{kernel}) not divisible by stride {stride}")]
    InexactConvExtent {
        input: usize,
        kernel: usize,
        padding: usize,
        stride: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch too small for train-mode normalization: {elements} element(s) per channel, need >= 2")]
    BatchTooSmall { elements: usize },

    #[error("negative batch variance {value} passed to running-stats update")]
    NegativeVariance { value: f64 },

    #[error("backward already ran on this tape; call reset_grads first")]
    DoubleBackward,

    #[error("loss node must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("model function is non-deterministic: two forward passes disagree")]
    NonDeterministic,

    #[error("mask fraction {0} outside [0, 1]")]
    InvalidFraction(f64),

    #[error("attribute batch dimension {got} does not match expected {expected}")]
    AttributeDimMismatch { got: usize, expected: usize },

    #[error("binarize requires continuous attributes")]
    NotContinuous,

    #[error("conditional norm layer called without deltas or bypass flags")]
    MissingDeltas,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
