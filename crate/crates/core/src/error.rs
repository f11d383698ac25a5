use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Which trainer invocation inside the wild-refit pipeline failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStage {
    Initial,
    Refit,
    Noiseless,
}

impl fmt::Display for FitStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitStage::Initial => write!(f, "initial fit"),
            FitStage::Refit => write!(f, "wild refit"),
            FitStage::Noiseless => write!(f, "noiseless fit"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("point outside the certified domain: {0}")]
    Domain(String),

    #[error("{solver} did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
        objective_trace: Vec<f64>,
    },

    #[error("noise-scale calibration failed: {reason}")]
    Calibration {
        reason: String,
        /// Sampled `(rho, radius)` pairs.
        trace: Vec<(f64, f64)>,
    },

    #[error("no radius below {r_max:.3e} satisfies the defining inequality")]
    UnboundedRadius {
        r_max: f64,
        /// Sampled `(r, lhs, rhs)` triples.
        trace: Vec<(f64, f64, f64)>,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("trainer failed during {stage}")]
    Trainer {
        stage: FitStage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn at_stage(self, stage: FitStage) -> Self {
        Error::Trainer {
            stage,
            source: Box::new(self),
        }
    }
}
