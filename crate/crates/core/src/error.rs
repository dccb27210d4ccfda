use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::data::DataError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Layer or kernel geometry that cannot be realized.
    #[error("configuration error: {0}")]
    Config(String),

    /// A scalar hyper-parameter is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A target row is not a probability distribution.
    #[error("target error: {0}")]
    Target(String),

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("attack left the feasible set: {0}")]
    Feasibility(String),

    #[error("model spec error: {0}")]
    Spec(String),

    #[error("invalid distribution: {0}")]
    Input(String),

    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
