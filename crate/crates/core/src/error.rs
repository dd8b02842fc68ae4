use thiserror::Error;

/// Errors produced by the analysis modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not symmetric (max |M - M^T| = {max_asymmetry:e})")]
    Asymmetric { max_asymmetry: f64 },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid communication matrix: {0}")]
    InvalidCommMatrix(String),

    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error(
        "error system is not stable: mode {index} (lambda_P = {lambda}) has gain |a(lambda - alpha)| = {gain}"
    )]
    Unstable { index: usize, lambda: f64, gain: f64 },

    #[error("no signal weight in (0, 1] stabilizes the error system (|a| = {a}, bound {bound})")]
    Infeasible { a: f64, bound: f64 },

    #[error("{0}")]
    Diverged(String),

    #[error("gaussian noise is unbounded; configure `uniform` or `truncated_gaussian` noise")]
    UnboundedNoise,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("cannot parse scenario: {0}")]
    Parse(String),

    #[error("invalid scenario field `{path}`: {reason}")]
    Scenario { path: String, reason: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Attaches a section prefix to a parameter error.
    pub(crate) fn in_section(self, section: &str) -> Self {
        match self {
            Error::InvalidParameter { name, reason } => Error::Scenario {
                path: format!("{section}.{name}"),
                reason,
            },
            other => other,
        }
    }

    /// True for errors in the inputs rather than in the dynamics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Asymmetric { .. }
                | Error::NotSquare { .. }
                | Error::DimensionMismatch { .. }
                | Error::InvalidGraph(_)
                | Error::InvalidCommMatrix(_)
                | Error::InvalidPerturbation(_)
                | Error::InvalidParameter { .. }
                | Error::UnboundedNoise
                | Error::Parse(_)
                | Error::Scenario { .. }
        )
    }

    /// True for errors that stem from an unstable or unstabilizable system.
    pub fn is_instability(&self) -> bool {
        matches!(
            self,
            Error::Unstable { .. } | Error::Infeasible { .. } | Error::Diverged(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
