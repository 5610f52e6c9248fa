//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by estimators, the descent loop, benchmarks, and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs violate a precondition (non-finite entries, shape mismatch, bad range).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Data cannot support the requested fit (identical points, rank deficiency).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// A linear-algebra routine failed beyond the jitter tolerance.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The regularization search found no candidate with a finite objective.
    #[error("regularization search failed: {0}")]
    SearchFailure(String),

    /// The descent loop produced a non-finite or exploding intermediate.
    #[error("divergence at step {step}: {message}")]
    Divergence { step: usize, message: String },

    /// The scenario does not support the requested operation.
    #[error("unsupported scenario: {0}")]
    UnsupportedScenario(String),

    /// A data file could not be parsed.
    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },

    /// The run configuration failed schema validation.
    #[error("config schema error: {0}")]
    Schema(String),

    /// A persisted model could not be read or written.
    #[error("persistence error: {0}")]
    Persistence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
