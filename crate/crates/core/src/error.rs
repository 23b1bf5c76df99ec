use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("MAC budget infeasible: {reason} (blocking layer {layer})")]
    BudgetInfeasible { layer: usize, reason: String },

    #[error("learner {index}: {source}")]
    Learner {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("action 1 is masked when all {0} learners have executed")]
    MaskedAction(usize),

    #[error("state field out of range: {0}")]
    StateOutOfRange(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("trace validation failed: {0}")]
    TraceValidation(String),

    #[error("cannot load {path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Bad input rather than a failure while running; maps to exit code 1.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidInput(_)
            | Error::InvalidSpec(_)
            | Error::InvalidConfig(_)
            | Error::BudgetInfeasible { .. }
            | Error::StateOutOfRange(_)
            | Error::Parse { .. }
            | Error::TraceValidation(_)
            | Error::Load { .. } => true,
            Error::Learner { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_learner(self, index: usize) -> Self {
        Error::Learner {
            index,
            source: Box::new(self),
        }
    }
}
