use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] trajforge::error::Error),
    #[error("missing input {path}: run `trajforge {producer}` first")]
    MissingInput { path: PathBuf, producer: String },
    #[error("no manifest in {dir} records {name}; the provenance chain is broken")]
    Unrecorded { dir: PathBuf, name: String },
    #[error("provenance mismatch for {name}: {manifest} records {recorded}, file has {actual}")]
    Provenance {
        name: String,
        manifest: PathBuf,
        recorded: String,
        actual: String,
    },
    #[error("{0}")]
    Usage(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
