use thiserror::Error;

/// Errors raised anywhere in the weighting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("no treated clusters")]
    NoTreatedClusters,

    #[error("no control clusters")]
    NoControlClusters,

    #[error("missing column '{column}' in {file}")]
    MissingColumn { file: String, column: String },

    #[error("treatment is not constant within cluster '{cluster}' (row {row})")]
    NonConstantTreatmentWithinCluster { cluster: String, row: usize },

    #[error("cannot parse '{value}' in column '{column}' at row {row}")]
    UnparseableValue {
        column: String,
        row: usize,
        value: String,
    },

    #[error("missing value in column '{column}' at row {row}")]
    MissingValue { column: String, row: usize },

    #[error("unknown covariate '{0}'")]
    UnknownCovariate(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("too few clusters: need at least {needed}, have {have}")]
    TooFewClusters { needed: usize, have: usize },

    #[error("degenerate residuals: {0}")]
    DegenerateResiduals(String),

    #[error("infeasible constraint: {0}")]
    InfeasibleConstraint(String),

    #[error("objective became non-finite at iteration {0}")]
    NonFiniteObjective(usize),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("treatment assignment produced a single arm after {0} attempts")]
    AllTreatedOrAllControl(usize),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
