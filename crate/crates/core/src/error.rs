use thiserror::Error;

/// Errors produced by panel ingestion, model assembly, sampling, and the
/// simulation harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing cell for unit `{unit}` at time {time}")]
    MissingCell { unit: String, time: i64 },

    #[error("duplicate cell for unit `{unit}` at time {time}")]
    DuplicateCell { unit: String, time: i64 },

    #[error("non-positive population {value} for unit `{unit}` at time {time}")]
    NonPositivePopulation {
        unit: String,
        time: i64,
        value: f64,
    },

    #[error("non-integer count {value} for unit `{unit}` at time {time}")]
    NonIntegerCount {
        unit: String,
        time: i64,
        value: f64,
    },

    #[error("treatment staircase violation for unit `{unit}` at time {time}: untreated after treated")]
    StaircaseViolation { unit: String, time: i64 },

    #[error("all units dropped by pre-treatment case filter (threshold {threshold})")]
    AllUnitsDropped { threshold: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("non-finite log posterior: offending term {term}")]
    NonFiniteLogPosterior { term: String },

    #[error("non-finite gradient component for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("chain {chain}: {msg}")]
    ChainFailure { chain: usize, msg: String },

    #[error("no observed cells in panel")]
    NoObservedCells,

    #[error("all predictive draws hit the stability guard at time {time}")]
    AllDrawsGuarded { time: i64 },

    #[error("{0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
