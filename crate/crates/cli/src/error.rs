use crate::movielens::IngestError;

pub type Result<T, E = BenchError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Model(#[from] modelserve_core::Error),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid experiment setting: {0}")]
    InvalidConfig(String),
}
