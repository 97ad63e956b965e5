use thiserror::Error;

/// Errors raised anywhere in the compression pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid shape: {rows}x{cols} needs {expected} entries, got {got}")]
    InvalidShape {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("SVD of {rows}x{cols} matrix did not converge after {sweeps} sweeps")]
    SvdNotConverged {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },
    #[error("eigendecomposition of {n}x{n} matrix did not converge after {sweeps} sweeps")]
    EigNotConverged { n: usize, sweeps: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("statistics matrix is not PSD: eigenvalue {eigenvalue:e}")]
    NotPsd { eigenvalue: f64 },
    #[error(
        "damped matrix is near-singular (smallest eigenvalue {eigenvalue:e}); increase damping"
    )]
    NearSingular { eigenvalue: f64 },
    #[error("probability vector invalid: {0}")]
    InvalidProbabilities(String),
    #[error("layer {layer}: {reason}")]
    InvalidLayer { layer: usize, reason: String },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("target index {index} out of range for vocabulary of {vocab}")]
    InvalidTarget { index: usize, vocab: usize },
    #[error("top-k of {k} out of range for vocabulary of {vocab}")]
    InvalidTopK { k: usize, vocab: usize },
    #[error("rank {rank} out of range 1..={max}")]
    InvalidRank { rank: usize, max: usize },
    #[error("statistics for layer {0} are not finalized")]
    NotFinalized(usize),
    #[error("no statistics accumulated for layer {0}")]
    NoTokens(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("remap budget shortfall: need {needed} bytes, candidates provide {available}")]
    BudgetShortfall { needed: u64, available: u64 },
    #[error("oracle size guard: {0}")]
    SizeGuard(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
