use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{kind}: shape mismatch: {detail}")]
    ShapeMismatch { kind: &'static str, detail: String },

    #[error("conv1d_valid: kernel size {kernel} exceeds sequence length {len}")]
    KernelTooLong { kernel: usize, len: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("computation record was already traversed; run a new forward pass")]
    StaleRecord,

    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("weights do not match configuration: {0}")]
    WeightMismatch(String),

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{what}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("cannot free {requested} bytes of {category}: only {held} held")]
    OverFree {
        category: &'static str,
        requested: u64,
        held: u64,
    },

    #[error("baseline {0:?} not found")]
    MissingBaseline(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            kind,
            detail: detail.into(),
        }
    }
}
