use thiserror::Error;

#[derive(Debug, Error)]
pub enum PwgeeError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("empty file: no data rows in {0}")]
    EmptyFile(String),

    #[error("missing column: {0}")]
    MissingColumn(String),

    #[error("non-numeric cell in column '{column}' at data row {row}: {value:?}")]
    NonNumericCell {
        column: String,
        row: usize,
        value: String,
    },

    #[error("zero-variance column: {0}")]
    ZeroVarianceColumn(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(
        "correlation parameter {rho} is outside the positive-definite range for cluster size {m}"
    )]
    InvalidCorrelation { rho: f64, m: usize },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("no eligible within-cluster pairs to estimate the correlation; use the independence structure")]
    NoCorrelationPairs,

    #[error("penalty threshold undefined for lambda = 0")]
    ZeroLambda,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular system in Newton update (|S| = {0})")]
    SingularSystem(usize),

    #[error("non-finite update after {0} step halvings")]
    NonFiniteUpdate(usize),

    #[error("need at least {needed} clusters, got {got}")]
    TooFewClusters { needed: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),
}

pub type Result<T, E = PwgeeError> = std::result::Result<T, E>;
