use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("value {value} is not a declared level of `{variable}`")]
    InvalidLevel { variable: String, value: f64 },

    #[error("index {index} out of range for {len} variables")]
    InvalidIndex { index: usize, len: usize },

    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),

    #[error("variable `{0}` is not categorical")]
    NotCategorical(String),

    #[error("invalid structural causal model: {0}")]
    InvalidScm(String),

    #[error("structural causal model is not linear: {0}")]
    NotLinear(String),

    #[error("invalid metric: {0}")]
    InvalidMetric(String),

    #[error("p = {0} has no closed form (requires 1 <= p <= inf)")]
    UnsupportedNorm(f64),

    #[error("no recourse exists: {0}")]
    NoRecourse(String),

    #[error("no grid action validates ({candidates} candidates checked)")]
    InfeasibleWithinGrid { candidates: usize },

    #[error("FARO sequence did not converge: costs per delta {trajectory:?}")]
    NonConvergent { trajectory: Vec<(f64, f64)> },

    #[error("training failed: {0}")]
    Training(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fairness metric undefined: {0}")]
    Metric(String),

    #[error(transparent)]
    Csv(#[from] CsvError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dataset CSV failures. Each schema violation has its own variant.
#[derive(Debug, Error)]
pub enum CsvError {
    #[error("malformed header: expected `{expected}`, found `{found}`")]
    MalformedHeader { expected: String, found: String },

    #[error("row {row}: expected {expected} columns, found {found}")]
    Arity {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}, column `{column}`: `{cell}` is not a number")]
    NonNumeric {
        row: usize,
        column: String,
        cell: String,
    },

    #[error("row {row}: label {label} is not -1 or +1")]
    InvalidLabel { row: usize, label: String },

    #[error("row {row}: split `{split}` is not `train` or `test`")]
    InvalidSplit { row: usize, split: String },

    #[error("csv: {0}")]
    Parse(#[from] csv::Error),
}
