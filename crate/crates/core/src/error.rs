use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: violates `{rule}`")]
    InvalidRecord { row: usize, rule: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite linear predictor at record {0}")]
    NonFinite(usize),
    #[error("{what} did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        grad_norm: f64,
    },
    #[error("{what}: matrix is singular or not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    Singular {
        what: &'static str,
        min_eigenvalue: f64,
    },
    #[error("{what}: coefficient diverged (|coef| > {limit}), likely separation or monotone likelihood")]
    Separation { what: &'static str, limit: f64 },
    #[error("empty risk set at event time {0}")]
    EmptyRiskSet(f64),
    #[error("record {record} has an event of cause {cause} at time {time} with no baseline hazard mass")]
    MissingBaselineMass {
        record: usize,
        cause: usize,
        time: f64,
    },
    #[error("stochastic EM draw {draw} failed: {source}")]
    Draw {
        draw: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("insufficient grid: {0}")]
    InsufficientGrid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
