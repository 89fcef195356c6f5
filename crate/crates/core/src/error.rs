use thiserror::Error;

use crate::matrix::PhaseState;

#[derive(Debug, Error)]
pub enum Error {
    #[error("algebra mismatch: {left} generators vs {right}")]
    AlgebraMismatch { left: u32, right: u32 },

    #[error("generator index {index} outside algebra with {generators} generators")]
    GeneratorOutOfRange { index: usize, generators: u32 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix dimension {0} must be even")]
    OddDimension(usize),

    #[error("matrix is not unitary (deviation {0:.3e})")]
    NotUnitary(f64),

    #[error("unknown variable label `{0}`")]
    UnknownLabel(String),

    #[error("unknown constant matrix `{0}`")]
    UnknownConstant(String),

    #[error("invalid roster: {0}")]
    Roster(String),

    #[error("polynomial parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("word of degree {degree} exceeds the cap of {cap} letters")]
    DegreeCap { degree: usize, cap: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("non-finite value at step {step} (t = {time}); last good state kept")]
    NonFinite {
        step: usize,
        time: f64,
        last_good: Box<PhaseState>,
    },

    #[error("degenerate spectrum: {0}")]
    Degenerate(String),

    #[error("empty sample set")]
    EmptySamples,

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
