use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed CSV at row {row}: {message}")]
    MalformedCsv { row: usize, message: String },

    #[error("non-numeric value {value:?} at row {row}, column {column:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("input contains no data rows")]
    EmptyInput,

    #[error("label column {0:?} not found in header")]
    MissingLabelColumn(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("row count mismatch: expected {expected}, found {found}")]
    RowMismatch { expected: usize, found: usize },

    #[error("variance fraction must lie in (0, 1], got {0}")]
    InvalidVarianceFraction(f64),

    #[error("data has zero total variance")]
    ZeroVariance,

    #[error("need at least {needed} points, got {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("invalid number of clusters {k} for {n} points")]
    InvalidK { k: usize, n: usize },

    #[error("invalid feedback record: {0}")]
    InvalidRecord(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("at least {needed} clusterings required, got {found}")]
    TooFewClusterings { needed: usize, found: usize },

    #[error("gold labels required")]
    MissingGoldLabels,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
