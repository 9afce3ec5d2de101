use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{source_name}: missing required column `{column}`")]
    MissingColumn { source_name: String, column: String },

    #[error("{source_name}, record {record}: {message}")]
    Parse {
        source_name: String,
        record: u64,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("duplicate country code {0}")]
    DuplicateCountry(String),

    #[error("unknown civilization label `{0}`")]
    UnknownCivilization(String),

    #[error("unknown country {0}")]
    UnknownCountry(String),

    #[error("design matrix is rank deficient at column `{column}`")]
    RankDeficient { column: String },

    #[error("{what} did not converge after {iterations} iterations ({detail})")]
    NonConvergence {
        what: String,
        iterations: usize,
        detail: String,
    },

    #[error("zero variance in {0}; correlation undefined")]
    ZeroVariance(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::NonConvergence { .. }
                | Error::ZeroVariance(_)
                | Error::Numerical(_)
        )
    }
}
