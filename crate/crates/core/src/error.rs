use std::path::PathBuf;

/// Errors raised anywhere in the refinement pipeline.
#[derive(Debug, thiserror::Error)]
pub enum VcrError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("missing embedding for image `{image_id}` view {view}")]
    MissingEmbedding { image_id: String, view: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = VcrError> = std::result::Result<T, E>;

impl VcrError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        VcrError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VcrError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        VcrError::Json {
            path: path.into(),
            source,
        }
    }
}
