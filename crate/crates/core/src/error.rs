use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for {what} (size {size})")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value during evaluation: {0}")]
    Evaluation(String),
    #[error("action {action} leaves the grid from cell {cell}")]
    Boundary { cell: usize, action: usize },
    #[error("link {to} is not downstream of link {from}")]
    Connectivity { from: usize, to: usize },
    #[error("destination {destination} unreachable from {origin}")]
    Unreachable { origin: usize, destination: usize },
    #[error("no feasible action{}", .0.map(|p| format!(" at position {p}")).unwrap_or_default())]
    DeadEnd(Option<usize>),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed trajectory {id}: {reason}")]
    Trajectory { id: u64, reason: String },
    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },
    #[error("ingestion failed: {unparsable} of {total} rows unparsable")]
    Ingest { unparsable: usize, total: usize },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn parse(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            reason: reason.into(),
        }
    }
}
