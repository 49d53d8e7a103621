use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("parse error: {0}")]
    Format(String),

    #[error("validation failed for students {ids:?}: {message}")]
    Validation { ids: Vec<u64>, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {stage}")]
    NonFinite { stage: &'static str },

    #[error("singular renormalisation: diag(ΩΩ) entry {value} at row {row} is too close to 1")]
    Singular { row: usize, value: f64 },

    #[error("rank-deficient design; collinear columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("weak instrument: first-stage F = {f_stat}")]
    WeakInstrument { f_stat: f64 },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("no feasible assignment: {0}")]
    Infeasible(String),

    #[error("problem too large: {0}")]
    Size(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
