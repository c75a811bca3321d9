use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("coefficient sample at {location} rejected: {reason}")]
    Coefficient { location: String, reason: String },
    #[error("operator size {size} exceeds the dense eigensolve cap {cap}; lower the resolution or raise the cap")]
    SizeCap { size: usize, cap: usize },
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("eigenvalue condition violated or near-violated (condition estimate {0:.3e})")]
    NearSingular(f64),
    #[error("iterative solver did not converge; residual history {0:?}")]
    NotConverged(Vec<f64>),
    #[error("solve failed for column {column}: {source}")]
    Column {
        column: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o failure at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
