use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by the exit-code family the CLI maps them to:
/// configuration, data, and backend/transport.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("profile generation failed for user {user_id} ({kind}): {source}")]
    Profile {
        user_id: String,
        kind: String,
        #[source]
        source: Box<Error>,
    },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("backend rejected the request (HTTP {status}): {message}")]
    BackendFatal { status: u16, message: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("stale or missing upstream artifact: rerun stage {stage} ({reason})")]
    Stale { stage: String, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code for this error: 1 usage/config, 2 data, 3 backend/transport.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Stale { .. } => 1,
            Error::Parse { .. } | Error::Io { .. } | Error::Data(_) => 2,
            Error::DimensionMismatch { .. } | Error::BackendFatal { .. } => 1,
            Error::Profile { source, .. } => source.exit_code(),
            Error::Backend(_) | Error::Transport(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
