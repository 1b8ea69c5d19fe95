use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("csv parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: String, message: String },
    #[error("missing label column `{0}`")]
    MissingLabel(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("feature group table: {0}")]
    Groups(String),
    #[error("stratified split: class {class} has {count} members, fewer than k={k}")]
    ClassTooSmall { class: usize, count: usize, k: usize },
    #[error("generator spec: {0}")]
    Generator(String),

    #[error(transparent)]
    Paillier(#[from] crate::paillier::PaillierError),

    #[error("training: {0}")]
    Training(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss diverged (non-finite) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Protocol(#[from] crate::federation::ProtocolError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
