use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("non-finite value in {component}")]
    NonFinite { component: String },

    #[error("schema version mismatch in {path}: expected {expected}, found {found}")]
    SchemaVersion {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("checksum mismatch in {path}: recorded {recorded}, computed {computed}")]
    Checksum {
        path: PathBuf,
        recorded: String,
        computed: String,
    },

    #[error("config hash mismatch: checkpoint has {found}, expected {expected}")]
    ConfigHash { expected: String, found: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error(
        "insufficient interventional coverage: nodes {nodes:?} have fewer than {min_count} samples"
    )]
    InsufficientCoverage { nodes: Vec<usize>, min_count: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
