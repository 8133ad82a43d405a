use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("task generation failed: {0}")]
    Generation(String),

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("ingestion failed at row {row}: {msg}")]
    Ingestion { row: usize, msg: String },

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
