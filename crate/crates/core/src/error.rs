use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes the
/// pipeline can actually hit: tensor shape/domain problems, corpus
/// generation, config parsing, checkpoint I/O and training divergence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("cannot normalize near-zero vector (norm {norm:.3e})")]
    DegenerateVector { norm: f64 },

    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("character {ch:?} is not in the vocabulary")]
    UnknownChar { ch: char },

    #[error("label index {idx} is out of vocabulary range")]
    BadLabelIndex { idx: usize },

    #[error("corpus generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contrastive batch needs at least 2 candidates, got {m}")]
    InsufficientBatch { m: usize },

    #[error("WER is undefined for an empty reference")]
    EmptyReference,

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint dimension mismatch for matrix `{matrix}`: expected {expected}, found {found}")]
    CheckpointMismatch {
        matrix: String,
        expected: String,
        found: String,
    },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to: 2 for usage/config
    /// problems, 3 for runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
