use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lpa_core::Error),

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input file, with the file and the offending location.
    #[error("validation error in {path}: {msg}")]
    Input { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn input(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CliError::Input {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 3 for numerical failure, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
