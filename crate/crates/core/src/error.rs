use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed field file: {0}")]
    Format(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("size mismatch: {0}")]
    Size(String),

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    Solver {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("unstable time step: {0}")]
    Stability(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("completion degenerate: {0}")]
    CompletionDegenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
