use thiserror::Error;

/// Faults raised by the numerical engines.
///
/// Validation failures of model parameters are *not* faults; they are
/// reported as entries of a [`crate::params::ValidationReport`].
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpsvError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible exponents: {0}")]
    Infeasible(String),

    #[error("positivity violated at step {step}: value {value:e}")]
    Positivity { step: usize, value: f64 },

    #[error("CFL violated at step {step} ({term}): ratio {ratio:.4} > 1")]
    Cfl {
        step: usize,
        term: &'static str,
        ratio: f64,
    },

    #[error("time {t} exceeds the horizon {horizon}")]
    Horizon { t: f64, horizon: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("under-resolved mollifier: epsilon {epsilon:e} < 2 * dy = {min:e}")]
    Mollifier { epsilon: f64, min: f64 },
}

impl LpsvError {
    /// True for faults that signal a numerical breakdown (CFL or positivity)
    /// rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, LpsvError::Positivity { .. } | LpsvError::Cfl { .. })
    }
}

pub type Result<T> = std::result::Result<T, LpsvError>;
