use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: invalid UTF-8 on line {line}")]
    InvalidUtf8 { path: PathBuf, line: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corpus `{0}` is empty")]
    EmptyCorpus(String),

    #[error("every corpus is empty")]
    AllCorporaEmpty,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("character {0:?} has no covering piece")]
    Coverage(char),

    #[error("target size {target} is below the {coverage} coverage pieces")]
    BelowCoverage { target: usize, coverage: usize },

    #[error("no ALP table cell for language `{lang}` at size {size}")]
    MissingCell { lang: String, size: usize },

    #[error("vocabulary training failed for `{lang}` at size {size}: {message}")]
    CellFailure {
        lang: String,
        size: usize,
        message: String,
    },

    #[error("unknown word id {0}")]
    UnknownId(u32),

    #[error("target {0} is not in the candidate set")]
    TargetNotInCandidates(u32),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

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
