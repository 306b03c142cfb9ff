use std::path::Path;

/// Harness failures, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] dcrl_core::Error),
    #[error("{failed} of {total} matrix cells failed: {}", cells.join(", "))]
    PartialMatrix {
        failed: usize,
        total: usize,
        cells: Vec<String>,
    },
}

impl HarnessError {
    /// 1 config error, 2 runtime failure, 3 partial matrix failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Runtime(_) | HarnessError::Core(_) => 2,
            HarnessError::PartialMatrix { .. } => 3,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        HarnessError::Runtime(format!("{}: {e}", path.display()))
    }

    pub(crate) fn config(msg: impl std::fmt::Display) -> Self {
        HarnessError::Config(msg.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
