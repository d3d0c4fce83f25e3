use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("series {sku}/{region}: week {week} does not follow week {previous}")]
    NonConsecutiveWeeks {
        sku: String,
        region: String,
        previous: i64,
        week: i64,
    },

    #[error("series {sku}/{region}: negative demand {demand} at week {week}")]
    NegativeDemand {
        sku: String,
        region: String,
        week: i64,
        demand: f64,
    },

    #[error("invalid series: {0}")]
    InvalidSeries(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("train end week {train_end} precedes all data (earliest week {earliest})")]
    TrainEndBeforeData { train_end: i64, earliest: i64 },

    #[error("week {week} is outside series starting at {start} with {len} rows")]
    WeekOutOfRange { week: i64, start: i64, len: usize },

    #[error("lag state expected week {expected}, got week {got}")]
    LagOrder { expected: i64, got: i64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("every cell in the batch is masked")]
    AllMasked,

    #[error("training diverged: non-finite loss on {consecutive} consecutive batches (iteration {iteration})")]
    Diverged { iteration: usize, consecutive: usize },

    #[error("unknown vertical {0:?}")]
    UnknownVertical(String),

    #[error("unknown model variant {0:?}")]
    UnknownVariant(String),

    #[error("missing future feature rows: need {needed}, got {available}")]
    MissingFutureFeatures { needed: usize, available: usize },

    #[error("schema hash mismatch: checkpoint has {expected}, schema is {found}")]
    SchemaMismatch { expected: String, found: String },

    #[error("unsupported document version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("total actual demand is zero")]
    ZeroActuals,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("neighbor count {k} exceeds {rows} training rows")]
    TooFewNeighbors { k: usize, rows: usize },

    #[error("no ratios for sku {0:?}")]
    MissingRatios(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}
