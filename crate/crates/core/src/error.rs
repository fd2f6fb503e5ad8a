//! Error types shared across the library.

use thiserror::Error;

/// Errors produced by model construction, evaluation, training and solving.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("sample {index} is marked optimal but carries no dual variables")]
    MissingDual { index: usize },

    #[error("sample {index} has no gradient record")]
    MissingGrad { index: usize },

    #[error("non-finite loss encountered (sample {sample})")]
    NonFiniteLoss { sample: usize },

    #[error("infeasible region: {0}")]
    Infeasible(String),

    #[error("all {0} training restarts failed")]
    AllRestartsFailed(usize),

    #[error("theta length mismatch: model expects {expected}, got {got}")]
    ThetaLength { expected: usize, got: usize },
}

/// Errors produced by the persistence layer (model files, dataset CSV).
#[derive(Debug, Error)]
pub enum PersistError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported model format version {got} (supported: {supported})")]
    Version { got: u32, supported: u32 },

    #[error("model schema error: {0}")]
    Schema(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("dataset header missing required column `{0}`")]
    MissingColumn(String),

    #[error("dataset row {row}: {msg}")]
    Row { row: usize, msg: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CoreResult<T> = Result<T, CoreError>;
