use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] shadowflow_core::Error),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.as_ref().to_path_buf(), detail: detail.into() }
    }

    /// Process exit code: 2 usage, 3 I/O, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use shadowflow_core::Error as C;
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::Image { .. } => 3,
            Error::Usage(_) => 2,
            Error::Core(C::NonFiniteLoss { .. } | C::StaleCache(_)) => 4,
            Error::Core(_) => 2,
        }
    }
}
