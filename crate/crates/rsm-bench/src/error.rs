use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    /// The configuration was rejected before any work started.
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] rsm_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    /// One or more audit checks failed.
    #[error("{failed} of {total} audit checks failed")]
    AuditFailed { failed: usize, total: usize },
}

impl BenchError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        BenchError::Invalid(msg.into())
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Invalid(_) => 2,
            BenchError::AuditFailed { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
