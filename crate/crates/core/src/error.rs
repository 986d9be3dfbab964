use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("integration diverged at step {step} (t = {t}); last finite state kept")]
    Divergence {
        step: usize,
        t: f64,
        last_x: Vec<f64>,
        last_lambda: f64,
    },

    #[error("trajectory too short: need at least {needed} points, got {got}")]
    TrajectoryTooShort { needed: usize, got: usize },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("derivative oracle mismatch in {which} at coordinate {coord}: analytic {analytic}, finite difference {numeric}")]
    OracleMismatch {
        which: &'static str,
        coord: usize,
        analytic: f64,
        numeric: f64,
    },

    #[error("policy enumeration guard exceeded: {count} deterministic policies > {limit}")]
    EnumerationGuard { count: f64, limit: usize },

    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
