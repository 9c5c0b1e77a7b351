use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}, column `{column}`: {msg}")]
    Parse {
        row: usize,
        column: String,
        msg: String,
    },

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("degenerate outcome: every observed outcome equals {0}")]
    DegenerateOutcome(f64),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("grid too coarse: {0} points, need at least 8")]
    GridTooCoarse(usize),

    #[error("infeasible fold plan: {n} rows cannot fill {k} folds")]
    InfeasibleFolds { n: usize, k: usize },

    #[error("domain error in {distance}{}: {msg}", .index.map(|i| format!(" at grid index {i}")).unwrap_or_default())]
    Domain {
        distance: String,
        index: Option<usize>,
        msg: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("magnitude error: {0}")]
    Magnitude(String),

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("insufficient data for level {level}: {have} rows, need at least {need}")]
    InsufficientData { level: i64, have: usize, need: usize },

    #[error("treatment level {0} is absent from the training rows")]
    MissingLevel(i64),

    #[error("cross-fit violation: {0} evaluation rows were also used for training")]
    CrossFitViolation(usize),

    #[error("solver failed after {iterations} iterations (residual {residual:.3e}): {msg}")]
    Solver {
        msg: String,
        iterations: usize,
        residual: f64,
        residual_trace: Vec<f64>,
    },

    #[error("infeasible moment condition: {0}")]
    InfeasibleMoment(String),

    #[error("rank deficiency: {0}")]
    Rank(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
