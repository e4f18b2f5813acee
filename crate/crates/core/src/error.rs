use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("header line {line}: {message}")]
    Header { line: usize, message: String },

    #[error("unsupported WFDB signal format {code} (supported: 16, 212)")]
    UnsupportedFormat { code: u16 },

    #[error("signal data truncated at byte offset {offset} (need {needed} bytes, have {available})")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("sample value {value} out of range [{min}, {max}]")]
    SampleRange { value: i32, min: i32, max: i32 },

    #[error("annotation stream at byte {offset}: {message}")]
    Annotation { offset: usize, message: String },

    #[error("csv row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("invalid record: {0}")]
    Record(String),

    #[error("invalid filter: {0}")]
    Filter(String),

    #[error("signal too short: need {needed} samples, have {actual}")]
    SignalTooShort { needed: usize, actual: usize },

    #[error("need at least {needed} R-peaks, have {actual}")]
    TooFewPeaks { needed: usize, actual: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stratification impossible: class {class} has {count} examples but {folds} folds requested; lower --folds or disable stratification")]
    Stratification { class: usize, count: usize, folds: usize },

    #[error("serialization: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
