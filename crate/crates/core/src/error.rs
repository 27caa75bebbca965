use std::path::PathBuf;

/// Crate-wide error type.
///
/// Variants are grouped by the subsystem that raises them; the CLI maps them
/// onto process exit codes (usage/config problems -> 1, data problems -> 2,
/// divergence -> 3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("singular parameter: {0}")]
    SingularParameter(String),

    #[error("non-finite state entering {0}")]
    NonFiniteState(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("optimizer did not converge: {0}")]
    NoConvergence(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
