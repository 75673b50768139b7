use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DhagError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DhagError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("optimizer state error: {0}")]
    State(String),

    /// A non-finite value reached a graph boundary or a loss.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("seed {seed} failed: {source}")]
    SeedRun {
        seed: u64,
        #[source]
        source: Box<DhagError>,
    },

    #[error("file error on {path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DhagError {
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DhagError::File {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad input or configuration, as opposed to numerical failures.
    pub fn is_user_error(&self) -> bool {
        match self {
            DhagError::Numerical(_) => false,
            DhagError::SeedRun { source, .. } => source.is_user_error(),
            _ => true,
        }
    }
}
