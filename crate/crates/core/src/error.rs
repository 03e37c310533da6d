use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum MopdError {
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate vector: {0}")]
    DegenerateVector(&'static str),

    #[error("empty support: all entries masked")]
    EmptySupport,

    #[error("disjoint support: reference mass on an exactly-zero entry")]
    DisjointSupport,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {context} ({index} >= {len})")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("numerical abort at epoch {epoch} step {step}: {reason}")]
    NumericalAbort {
        epoch: usize,
        step: usize,
        reason: String,
        /// JSON snapshot of the training state at the failing step.
        dump: String,
    },

    #[error("checkpoint/task mismatch: {0}")]
    HashMismatch(String),

    #[error("generation failed: {0}")]
    GenerationFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MopdError>;

impl MopdError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MopdError::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI: 1 for usage/config problems, 2 for
    /// numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            MopdError::NumericalAbort { .. } | MopdError::NonFinite(_) => 2,
            _ => 1,
        }
    }
}
