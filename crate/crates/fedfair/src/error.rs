use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("non-finite value encountered in {context} (index {index})")]
    NonFinite { context: String, index: usize },

    #[error("checkpoint for round {0} is not in the store")]
    MissingCheckpoint(usize),

    #[error("metric {metric} needs at least 2 groups, dataset has {found}")]
    TooFewGroups { metric: &'static str, found: usize },

    #[error("consistency metric requires a neighbor graph")]
    MissingNeighbors,

    #[error("all group/label cells used by the {0} surrogate are empty")]
    NoSurrogateSignal(&'static str),

    #[error("{rule}: {message}")]
    AggregationConstraint { rule: &'static str, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("IDX parse error at byte {offset}: {message}")]
    IdxParse { offset: u64, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed CSV in {path}: {message}")]
    Csv { path: String, message: String },

    #[error("malformed JSON in {path}: {message}")]
    Json { path: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
