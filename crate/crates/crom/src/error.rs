use std::path::{Path, PathBuf};

/// Failures of the pipeline layer, grouped by process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Numerical(#[from] crom_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// 1 usage, 2 I/O, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Io { .. } | Error::Format { .. } => 2,
            // bad arguments that only the numerical layer can detect
            Error::Numerical(crom_core::Error::InvalidInput(_) | crom_core::Error::UnknownStrategy { .. }) => 1,
            Error::Numerical(_) => 3,
        }
    }
}
