use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("class {class} has {available} instances but {needed} are required")]
    Infeasible {
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        norms: String,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrajError>;

impl TrajError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }
}

/// Lets model code run inside `diffcore` callbacks such as gradient checks.
impl From<TrajError> for DiffError {
    fn from(e: TrajError) -> Self {
        match e {
            TrajError::Diff(d) => d,
            other => DiffError::Invalid {
                op: "trajcl",
                msg: other.to_string(),
            },
        }
    }
}
