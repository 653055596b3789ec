use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),

    #[error("cannot parse clip file name {0}")]
    BadFileName(PathBuf),

    #[error("anomaly clip {0} found in a train split")]
    AnomalyInTrain(PathBuf),

    #[error("test clip {path} belongs to {machine_type}/id_{machine_id:02}, which has no training data")]
    UnseenTestMachine {
        path: PathBuf,
        machine_type: String,
        machine_id: u32,
    },

    #[error("unknown machine {0}")]
    UnknownMachine(String),

    #[error("wav {path}: {reason}")]
    Wav { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding row {row} has near-zero norm after the perturbation head")]
    DegenerateEmbedding { row: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
