use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for the whole engine.
///
/// Variants are grouped by failure class so that a front end can map them to
/// exit codes: configuration and argument problems, data problems (corpus or
/// checkpoint files), and numerical divergence during training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid span [{s}, {e}]: spans must satisfy 0 <= start <= end <= 1")]
    InvalidSpan { s: f64, e: f64 },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid cost matrix: {0}")]
    CostMatrix(String),

    #[error("brute-force assignment limited to at most {limit} columns, got {got}")]
    OracleTooLarge { limit: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code this error maps to: 1 usage/config, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged(_) => 3,
            Error::Corpus(_) | Error::Checkpoint(_) | Error::Artifact(_) | Error::Io(_) => 2,
            _ => 1,
        }
    }
}
