use std::path::{Path, PathBuf};

/// Failure decoding one of the binary formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    Version(u16),
    #[error("truncated input")]
    Truncated,
    #[error("{0}")]
    Corrupt(String),
    #[error("header JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] nmfp_core::Error),
}

/// Failure reading or writing a file, tagged with its path.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{}: {err}", path.display())]
    Io { path: PathBuf, err: std::io::Error },
    #[error("{}: {err}", path.display())]
    Wav { path: PathBuf, err: hound::Error },
    #[error("{}: {err}", path.display())]
    Format { path: PathBuf, err: FormatError },
    #[error("{}: {err}", path.display())]
    Core { path: PathBuf, err: nmfp_core::Error },
    #[error("{}: {err}", path.display())]
    Json { path: PathBuf, err: serde_json::Error },
    #[error("{}: {err}", path.display())]
    Csv { path: PathBuf, err: csv::Error },
}

impl IoError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            err: source,
        }
    }

    pub fn wav(path: &Path, source: hound::Error) -> Self {
        Self::Wav {
            path: path.into(),
            err: source,
        }
    }

    pub fn format(path: &Path, source: impl Into<FormatError>) -> Self {
        Self::Format {
            path: path.into(),
            err: source.into(),
        }
    }

    pub fn core(path: &Path, source: nmfp_core::Error) -> Self {
        Self::Core {
            path: path.into(),
            err: source,
        }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            err: source,
        }
    }

    pub fn csv(path: &Path, source: csv::Error) -> Self {
        Self::Csv {
            path: path.into(),
            err: source,
        }
    }
}

pub type IoResult<T> = Result<T, IoError>;
