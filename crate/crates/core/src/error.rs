use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("pregrasp palm is inside the object")]
    PregraspInCollision,
    #[error("demo style infeasible: {0}")]
    InfeasibleStyle(String),
    #[error("non-finite value in parameter slice `{slice}` at index {index}")]
    NonFinite { slice: String, index: usize },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("dataset format error: {0}")]
    Dataset(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
