use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate kernel: smallest eigenvalue {lambda0:e} is not positive")]
    DegenerateKernel { lambda0: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },

    #[error("training diverged at iteration {iteration} (loss {loss:e}, eta {eta:e}, lambda0 {lambda0:e})")]
    Divergence {
        iteration: usize,
        loss: f64,
        eta: f64,
        lambda0: f64,
    },

    #[error("worker {worker} diverged at local step {step}: loss {loss}")]
    WorkerDivergence { worker: usize, step: usize, loss: f64 },

    #[error("corrupted partition: {0}")]
    Corruption(String),

    #[error("incomplete partition: {0}")]
    IncompletePartition(String),

    #[error("pruning leaves no filters in layer {layer}")]
    OverPrune { layer: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
