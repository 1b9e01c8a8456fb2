use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("line {line}: probabilities sum to {sum}, expected 1 (tolerance 1e-6)")]
    ProbabilitySum { line: usize, sum: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty set: {0}")]
    EmptySet(&'static str),

    #[error("index {index} out of range for set of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("missing true label for record `{0}`")]
    MissingLabel(String),

    #[error("missing ground truth for prediction `{0}`")]
    MissingGroundTruth(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("solver did not converge after {iterations} iterations (max KKT violation {violation:e})")]
    NotConverged { iterations: usize, violation: f64 },

    #[error("attack `{attack}` requires {capability}, which the {setting} setting does not provide")]
    Capability {
        attack: String,
        capability: &'static str,
        setting: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
