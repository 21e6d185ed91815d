use std::path::PathBuf;

/// Errors raised by the fusion library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed {what} in {}: {message}", path.display())]
    Format {
        what: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("scene generation failed: {0}")]
    Generation(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for errors caused by user-supplied configuration or files rather
    /// than by a failure during computation.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_) | Error::Format { .. } | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
