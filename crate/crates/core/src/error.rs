use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent dimensions or otherwise malformed configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed to produce a trustworthy answer. This is
    /// "unknown", never "infeasible".
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("feasibility is not monotone in epsilon on the pre-scan grid: {grid:?}")]
    NonMonotone { grid: Vec<(f64, bool)> },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
