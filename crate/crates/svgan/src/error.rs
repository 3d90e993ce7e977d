use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}, line {line}: {detail}")]
    Csv { path: PathBuf, line: u64, detail: String },
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] svgan_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// 2 for rejected inputs, 3 for failures while doing the work.
    pub fn exit_code(&self) -> i32 {
        use svgan_core::Error as C;
        match self {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Io { .. } => 3,
            Error::Json { .. } | Error::Format { .. } | Error::Csv { .. } | Error::Validation(_) => 2,
            Error::Numeric(_) => 3,
            Error::Core(C::NonFinite(_) | C::BackwardTwice | C::NonScalarLoss(_) | C::Observer(_)) => 3,
            Error::Core(_) => 2,
        }
    }
}
