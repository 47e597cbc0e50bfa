use thiserror::Error;

/// Structured errors for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for an operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// An argument violates an operation's precondition.
    #[error("invalid argument in {context}: {message}")]
    InvalidArgument { context: String, message: String },

    /// A parameter path was not found in the store.
    #[error("unknown parameter path: {0}")]
    UnknownParam(String),

    /// A parameter has no gradient when one is required.
    #[error("missing gradient for parameter: {0}")]
    MissingGradient(String),

    /// Configuration failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    /// Dataset could not be built or sampled from.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint file is malformed or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error on {path}: {message}")]
    Decode { path: String, message: String },
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn invalid(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
