//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration: unknown task names, invalid hyperparameters, malformed config files.
    #[error("config error: {0}")]
    Config(String),

    /// Bad or inconsistent input data: manifests, volumes, slides, masks, label domains.
    #[error("data error: {0}")]
    Data(String),

    /// A file could not be parsed as the format it claims to be.
    #[error("format error in {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Non-finite values encountered during training or evaluation.
    #[error("numerical failure: {0}")]
    Numerics(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status for the CLI: 2 config, 3 data/format/io, 4 numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } => 3,
            Error::Numerics(_) => 4,
        }
    }
}
