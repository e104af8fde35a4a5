use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular design matrix: {0}")]
    Singular(String),

    #[error("parse error in {file} at row {row}, column {column}: {message}")]
    Parse {
        file: String,
        row: usize,
        column: String,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Configuration and IO failures map to exit code 2, everything else to 1.
    pub fn is_config_or_io(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Io { .. } | Error::Parse { .. } | Error::Csv(_)
        )
    }
}
