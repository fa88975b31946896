use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("no samples survive filtering")]
    EmptyAfterFilter,

    #[error("implied covariance is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("singular fixed-effect design: {0}")]
    SingularDesign(String),

    #[error(
        "memory budget exceeded: {required_bytes} bytes needed, {limit_bytes} allowed; \
         subsample the training data (subsample_for_budget) and refit"
    )]
    BudgetExceeded {
        required_bytes: u64,
        limit_bytes: u64,
    },

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_) | Error::SingularDesign(_) | Error::Diverged(_)
        )
    }
}
