use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("layer index {index} out of range for {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("input length {got} does not match expected width {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable does not belong to this tape")]
    DetachedNode,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("batch length mismatch: {0} vs {1}")]
    BatchMismatch(usize, usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("backbone seed mismatch: {0} vs {1}")]
    BackboneMismatch(u64, u64),
    #[error("could not place {classes} prototypes {min_angle_deg} degrees apart in {dim} dimensions")]
    InfeasibleSeparation {
        classes: usize,
        dim: usize,
        min_angle_deg: f64,
    },
    #[error("dataset not found: {0}")]
    DatasetNotFound(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
