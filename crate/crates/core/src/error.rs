use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
///
/// Variants are grouped so that callers (the CLI in particular) can map them
/// onto a small set of failure classes: configuration, data contract,
/// numeric and IO.
#[derive(Debug, Error)]
pub enum CdeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("value {value} at index {index} lies outside the domain {domain}")]
    Domain {
        index: usize,
        value: f64,
        domain: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("degenerate response: all responses equal {0}")]
    DegenerateResponse(f64),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("division by zero: observed value at index {0} is zero")]
    DivisionByZero(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl CdeError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CdeError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CdeError>;
