use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("axis {axis} is out of range for a tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward needs a single-element output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid activation parameter: {0}")]
    InvalidParameter(String),

    #[error("second derivative of {family} is undefined at the kink x = {x}")]
    Kink { family: &'static str, x: f64 },

    #[error("evaluation grid is empty or degenerate")]
    EmptyGrid,

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("no gradient recorded for learnable parameter `{0}`")]
    MissingGradient(String),

    #[error("invalid attack configuration: {0}")]
    InvalidAttack(String),

    #[error("sample {index} is misclassified before the attack")]
    Misclassified { index: usize },

    #[error("empirical Lipschitz estimate undefined: all {0} samples had x̂ = x")]
    DegenerateLipschitz(usize),

    #[error("schedule step {step} exceeds horizon {horizon}")]
    ScheduleOutOfRange { step: usize, horizon: usize },

    #[error("invalid training configuration: {0}")]
    InvalidTraining(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {actual:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        actual: u32,
    },

    #[error("truncated IDX file {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("IDX image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("unsupported checkpoint: {0}")]
    Checkpoint(String),

    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
