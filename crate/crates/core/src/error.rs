use std::io;

use crate::model::Item;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("unknown item {0}")]
    UnknownItem(Item),

    #[error("unknown user {0}")]
    UnknownUser(u64),

    #[error("unknown model {0:?}")]
    UnknownModel(String),

    #[error("model {0:?} already exists")]
    ModelExists(String),

    #[error("unknown version {0}")]
    UnknownVersion(u64),

    #[error("observation log is empty")]
    EmptyLog,

    #[error("a retrain of model {0:?} is already in flight")]
    RetrainInFlight(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The observation could not be made durable; nothing was applied and the
    /// caller may retry.
    #[error("observation log append failed (retriable): {0}")]
    LogAppend(#[source] io::Error),

    #[error("checksum mismatch in {what}: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch {
        what: &'static str,
        stored: u32,
        computed: u32,
    },

    #[error("corrupt {what}: {detail}")]
    Corrupt { what: &'static str, detail: String },

    #[error("model {0:?} is shutting down")]
    ShuttingDown(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::LogAppend(_))
    }

    pub(crate) fn corrupt(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            what,
            detail: detail.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub(crate) fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
