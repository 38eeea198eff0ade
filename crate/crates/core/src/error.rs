use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no observations survive filtering (min per day {min_per_day}, min per station {min_per_station})")]
    EmptyAfterFilter { min_per_day: usize, min_per_station: usize },
    #[error("duplicate observation for station {station} on day {day}")]
    DuplicateKey { station: String, day: i64 },
    #[error("unknown station {0}")]
    UnknownStation(String),
    #[error("station sets overlap: {0}")]
    OverlappingSets(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("point {index} at ({x}, {y}) lies outside the mesh")]
    PointOutsideMesh { index: usize, x: f64, y: f64 },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("day {0} was not observed in the training data")]
    UnseenDay(i64),
    #[error("invalid fold count K = {k} for n = {n}")]
    BadK { k: usize, n: usize },
    #[error("training set is empty after exclusion (iteration {iteration})")]
    EmptyTrainSet { iteration: usize },
    #[error("response has zero variance")]
    DegenerateResponse,
    #[error("problem too large for the dense path: {0}")]
    TooLarge(String),
    #[error("missing required column: {0}")]
    Schema(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyAfterFilter { .. } => "EmptyAfterFilter",
            Error::DuplicateKey { .. } => "DuplicateKey",
            Error::UnknownStation(_) => "UnknownStation",
            Error::OverlappingSets(_) => "OverlappingSets",
            Error::InvalidValue(_) => "InvalidValue",
            Error::DegenerateGeometry(_) => "DegenerateGeometry",
            Error::PointOutsideMesh { .. } => "PointOutsideMesh",
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::UnseenDay(_) => "UnseenDay",
            Error::BadK { .. } => "BadK",
            Error::EmptyTrainSet { .. } => "EmptyTrainSet",
            Error::DegenerateResponse => "DegenerateResponse",
            Error::TooLarge(_) => "TooLarge",
            Error::Schema(_) => "SchemaError",
            Error::Parse { .. } => "ParseError",
            Error::Config(_) => "ConfigError",
            Error::Fold { source, .. } => source.kind(),
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
