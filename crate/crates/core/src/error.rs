use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no rows")]
    NoRows,
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("duplicate cell (unit `{unit}`, period {period})")]
    DuplicateCell { unit: String, period: i64 },
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("no control units remain")]
    NoControls,
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("factor count {r} exceeds the feasible bound {bound}: {reason}")]
    TooManyFactors { r: usize, bound: usize, reason: String },
    #[error("unit `{unit}` has {have} usable pre-treatment periods, needs {need}")]
    InsufficientPrePeriods { unit: String, have: usize, need: usize },
    #[error("cannot impute unit `{unit}` at period {period}: no time effect estimated for that period")]
    NoTimeEffect { unit: String, period: i64 },
    #[error("fit does not belong to this panel: {0}")]
    FitMismatch(String),
    #[error("matrix completion input has an empty {axis} at index {index}")]
    EmptyLine { axis: &'static str, index: usize },
    #[error("rank-deficient design; collinear columns: {}", .0.join(", "))]
    Collinear(Vec<String>),
    #[error("compute series has no value for period {0}")]
    MissingCompute(i64),
    #[error("group `{0}` has no documents")]
    EmptyGroup(String),
    #[error("bootstrap failed: {0}")]
    Bootstrap(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible simulation spec: {0}")]
    InfeasibleSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
