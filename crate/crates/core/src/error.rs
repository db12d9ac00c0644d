use std::path::PathBuf;

use crate::autodiff::AutodiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema mismatch: missing columns {missing:?}, unknown columns {unknown:?}")]
    Schema {
        missing: Vec<String>,
        unknown: Vec<String>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("cannot split {0} rows: at least 5 are required")]
    DegenerateSplit(usize),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("cannot impute `{column}`: {donors} donors available, k = {k}")]
    ImputationInfeasible {
        column: String,
        donors: usize,
        k: usize,
    },

    #[error("quantiles undefined for `{column}`: {n} values, need at least 4")]
    QuantileUndefined { column: String, n: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("ensemble error: {0}")]
    Ensemble(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("stage `{stage}` has no usable upstream output; run `farebench {prerequisite}` first")]
    MissingStage { stage: String, prerequisite: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingStage { .. } | Error::UnknownColumn(_) => 2,
            Error::Numeric(_) => 4,
            Error::Autodiff(AutodiffError::NumericFailure { .. }) => 4,
            _ => 3,
        }
    }
}
