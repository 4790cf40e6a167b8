use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("scenario file error: {0}")]
    Scenario(String),

    #[error("input is empty")]
    EmptyInput,

    #[error("bad header: {0}")]
    Header(String),

    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("stratum {index} has {units} unit{} (id {id:?})", if *units == 1 { "" } else { "s" })]
    StratumTooSmall { index: usize, id: String, units: usize },

    #[error("stratum {index} has no treated unit (id {id:?})")]
    NoTreated { index: usize, id: String },

    #[error("stratum {index} has {treated} treated units (id {id:?})")]
    MultipleTreated { index: usize, id: String, treated: usize },

    #[error("pair scores require every stratum to be a pair; stratum {index} has {units} units")]
    NotPairs { index: usize, units: usize },

    #[error("outcome {outcome} has zero scale (every pair tied)")]
    ZeroScale { outcome: usize },

    #[error("degenerate outcome {outcome}: score column is identically zero")]
    DegenerateOutcome { outcome: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value at unit {unit}, outcome {outcome}")]
    NonFinite { unit: usize, outcome: usize },

    #[error("gamma must be >= 1, got {0}")]
    GammaBelowOne(f64),

    #[error("alpha must lie in (0, 0.5], got {0}")]
    AlphaOutOfRange(f64),

    #[error("size guard exceeded: {what} = {value} > {limit}")]
    TooLarge { what: &'static str, value: usize, limit: usize },

    #[error("invalid lambda set: {0}")]
    Lambda(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid correlation input: {0}")]
    Correlation(String),

    #[error("variance of outcome {outcome} vanishes at the probed assignment probabilities")]
    DegenerateVariance { outcome: usize },

    #[error("denominator lambda' Sigma lambda is not positive ({0})")]
    NonPositiveVariance(f64),

    #[error("invalid argument: {0}")]
    Invalid(String),
}
