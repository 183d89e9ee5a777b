use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error at {path}:{row}: {message}")]
    Ingestion {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("non-finite loss term `{term}` at iteration {iteration}")]
    NonFinite { term: String, iteration: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("path not found: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("torch error: {0}")]
    Torch(#[from] tch::TchError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for user or configuration mistakes, 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Ingestion { .. }
            | Error::Plan(_)
            | Error::MissingPath(_)
            | Error::Shape(_)
            | Error::Checkpoint(_) => 1,
            Error::NonFinite { .. }
            | Error::Io { .. }
            | Error::Image(_)
            | Error::Json(_)
            | Error::Torch(_) => 2,
        }
    }
}
