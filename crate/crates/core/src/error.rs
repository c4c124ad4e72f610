use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ApaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ApaError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero-norm vector has no direction")]
    ZeroNorm,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible capacity: {shards} shards of at most {capacity} cannot hold {samples} samples")]
    InfeasibleCapacity {
        shards: usize,
        capacity: usize,
        samples: usize,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("unknown sample id {0}")]
    UnknownId(u64),

    #[error("sample id {0} was already removed")]
    AlreadyRemoved(u64),

    #[error("sample id {0} belongs to the validation set and cannot be unlearned")]
    ValidationId(u64),

    #[error("validation cache row {0} is stale")]
    StaleCache(usize),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl ApaError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Self::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 2 for broken invariants, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ApaError::StaleCache(_) | ApaError::Invariant(_) => 2,
            _ => 1,
        }
    }
}
