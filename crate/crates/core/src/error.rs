use std::path::PathBuf;

use diffcore::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("width mismatch in episode {episode}: {field} has width {found}, expected {expected}")]
    WidthMismatch {
        episode: usize,
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("dataset is not labeled with sub-goals")]
    Unlabeled,
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("step called on a finished episode")]
    StepAfterDone,
    #[error("policy `{0}` requires a desired return")]
    MissingDesiredReturn(String),
    #[error("history is missing the {0} channel")]
    MissingChannel(&'static str),
    #[error("empty history")]
    EmptyHistory,
    #[error("non-finite loss at iteration {iteration}; training aborted")]
    Diverged {
        iteration: u64,
        last_good: Box<crate::checkpoint::Checkpoint>,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing table cells: {}", .0.join("; "))]
    MissingCells(Vec<String>),
    #[error("no evaluation results")]
    EmptyResults,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
