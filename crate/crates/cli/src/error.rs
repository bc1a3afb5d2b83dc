use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("optimizer diverged at outer iteration {outer}, inner step {inner}; trace written to {}", trace.display())]
    Divergence { outer: usize, inner: usize, trace: PathBuf },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Divergence { .. } => 3,
            CliError::Io { .. } => 4,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            context: path.display().to_string(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

impl From<mmdag::Error> for CliError {
    fn from(e: mmdag::Error) -> Self {
        match e {
            mmdag::Error::Divergence { outer, inner, .. } => CliError::Divergence {
                outer,
                inner,
                trace: PathBuf::new(),
            },
            other => CliError::Validation(other.to_string()),
        }
    }
}
