//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("weights must be strictly positive (found {value} at index {index})")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("weight scheme has {got} entries but the sample has {expected}")]
    WeightCountMismatch { expected: usize, got: usize },

    #[error("{op} requires per-cluster weights")]
    PerClusterRequired { op: &'static str },

    #[error("empty sample: at least one cluster with one observation is required")]
    EmptySample,

    #[error("singular score derivative for {family} at {point:?} (condition number {condition:.3e})")]
    SingularBread {
        family: String,
        point: Vec<f64>,
        condition: f64,
    },

    #[error("covariance determinant is not positive ({value:.3e})")]
    NonPositiveDeterminant { value: f64 },

    #[error("parameter out of range: {what}")]
    OutOfRange { what: String },

    #[error("weights sum to {got:.6} but must sum to the observation count {expected}")]
    WeightSumMismatch { expected: f64, got: f64 },

    #[error("csv error at line {line}: {msg}")]
    Csv { line: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
