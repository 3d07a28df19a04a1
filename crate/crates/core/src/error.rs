use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by the numeric core, the model and the data pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {what} (size {size})")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("user has an empty click history")]
    EmptyHistory,

    #[error("metric {0} is undefined for this impression")]
    UndefinedMetric(&'static str),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("unknown {what}: {id}")]
    Unknown { what: &'static str, id: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err<T>(op: &'static str, left: &[usize], right: &[usize]) -> Result<T> {
    Err(Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    })
}
