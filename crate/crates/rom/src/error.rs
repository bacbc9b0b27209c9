use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] rom_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(rom_core::Error::Shape { .. }) => "shape",
            Error::Core(rom_core::Error::Domain { .. }) => "domain",
            Error::Core(rom_core::Error::Invalid(_)) => "invalid",
            Error::Core(rom_core::Error::Generation(_)) => "generation",
            Error::Core(rom_core::Error::Training(_)) => "training",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::Format { .. } => "format",
            Error::Usage(_) => "usage",
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            _ => 1,
        }
    }

    /// Single-line JSON description.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
        }
        #[derive(Serialize)]
        struct Line<'a> {
            error: Body<'a>,
        }
        let line = Line {
            error: Body {
                kind: self.kind(),
                message: self.to_string().replace('\n', " "),
            },
        };
        serde_json::to_string(&line).expect("error line serializes")
    }
}
