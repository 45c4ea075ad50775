use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("site index {index} out of range for {n}x{n} lattice")]
    SiteOutOfRange { index: usize, n: usize },

    #[error("invalid spin grid: {0}")]
    InvalidGrid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("quadrature did not converge (estimated error {error:e} after {intervals} intervals)")]
    Quadrature { error: f64, intervals: usize },

    #[error("training diverged in stage `{stage}` at epoch {epoch}")]
    Diverged { stage: String, epoch: usize },

    #[error("{0} required")]
    MissingStage(String),

    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("no susceptibility peak: {0}")]
    NoPeak(String),

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error("{path} already exists (use --force to overwrite)")]
    Exists { path: PathBuf },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
