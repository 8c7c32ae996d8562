use std::path::PathBuf;

/// Errors produced by the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was applied to an object in the wrong state, e.g. a
    /// spatial-domain channel handed to an angular-domain operation or an
    /// untrained network used for inference.
    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch for array `{array}`: manifest {expected:08x}, data {actual:08x}")]
    Checksum {
        array: String,
        expected: u32,
        actual: u32,
    },

    #[error("array `{array}` is truncated: expected {expected} bytes, found {actual}")]
    Truncated {
        array: String,
        expected: u64,
        actual: u64,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::State(_) => "state",
            Error::Config { .. } => "invalid-config",
            Error::Io { .. } => "io",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Checksum { .. } => "checksum",
            Error::Truncated { .. } => "truncated",
            Error::Format { .. } => "format",
            Error::MissingPrerequisite(_) => "missing-prerequisite",
            Error::Diverged(_) => "diverged",
        }
    }
}
