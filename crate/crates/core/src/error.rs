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

    #[error("sqrt of negative value {0}")]
    NegativeSqrt(f64),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward root was not produced under tracing")]
    UntracedRoot,

    #[error("timestep {t} out of range for schedule with {steps} steps")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("degenerate terminal step: alpha_bar is zero at t={0}")]
    DegenerateTerminalStep(usize),

    #[error("step ordering violated: {0}")]
    StepOrder(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("pixel value {value} outside [0, 1] at index {index}")]
    PixelOutOfRange { value: f64, index: usize },

    #[error("token id {id} out of range for slot {slot} (vocabulary size {vocab})")]
    TokenOutOfRange { slot: usize, id: usize, vocab: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("nothing to edit: source and edit prompts are identical")]
    NothingToEdit,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
