use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or mismatched input data (shapes, dimensions, non-finite values).
    #[error("input error: {0}")]
    Input(String),

    /// A value violates a documented constraint (non-positive hyperparameter, bad probability, ...).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Every MMLE restart failed; one diagnostic line per restart.
    #[error("fit error: all {} restarts failed: {}", .0.len(), .0.join("; "))]
    Fit(Vec<String>),

    #[error("optimization error: {0}")]
    Optimization(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Validation(_) => "validation",
            Error::Numerical(_) => "numerical",
            Error::Unsupported(_) => "unsupported",
            Error::Config(_) => "config",
            Error::Fit(_) => "fit",
            Error::Optimization(_) => "optimization",
            Error::Precondition(_) => "precondition",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Serialization(_) => "serialization",
        }
    }
}
