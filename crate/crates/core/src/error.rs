use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("covariance matrix is not positive semidefinite (pivot {pivot}, value {value:e}, jitter {jitter:e})")]
    NotPositiveDefinite {
        pivot: usize,
        value: f64,
        jitter: f64,
    },

    #[error("infinite RKHS norm: vector has a component outside the range of the covariance (relative residual {residual:e})")]
    InfiniteRkhsNorm { residual: f64 },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// True for failures of the numerics, as opposed to bad input or IO.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::InfiniteRkhsNorm { .. }
                | Error::NotConverged { .. }
                | Error::NonFinite(_)
                | Error::Infeasible(_)
        )
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        Err(Error::SizeMismatch { expected, got })
    } else {
        Ok(())
    }
}
