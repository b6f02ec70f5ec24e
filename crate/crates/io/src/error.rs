use std::path::{Path, PathBuf};

/// Everything the command line can fail with, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Engine(#[from] hnfnet::Error),
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type IoResult<T> = Result<T, IoError>;

impl IoError {
    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 usage, 2 validation, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            IoError::Usage(_) => 1,
            IoError::Engine(_) | IoError::Format { .. } => 2,
            IoError::Io { .. } => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "usage",
            2 => "validation",
            _ => "runtime",
        }
    }

    /// Single line for the error stream: `error code=<n> kind=<kind> message=<text>`.
    pub fn diagnostic(&self) -> String {
        let message = self.to_string().replace(['\n', '\r'], " ");
        format!("error code={} kind={} message={}", self.exit_code(), self.kind(), message)
    }
}
