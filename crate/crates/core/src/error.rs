use thiserror::Error;

/// Errors produced by model parsing, compilation and numerical analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("quadrature did not converge: estimate {estimate:e} with error {error:e} (tolerance {tolerance:e})")]
    Quadrature {
        estimate: f64,
        error: f64,
        tolerance: f64,
    },

    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid initial condition: {0}")]
    InitialCondition(String),

    #[error("operation not applicable to this model: {0}")]
    Inapplicable(String),

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("step size underflow at t = {time} (h = {step:e}); the system may be stiff")]
    StepSizeUnderflow { time: f64, step: f64 },

    #[error("step limit of {steps} reached at t = {time}")]
    StepLimit { time: f64, steps: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("fixpoint search unresolved: residual {residual:e} after refinement")]
    Unresolved {
        residual: f64,
        /// Last points of the seeding trajectory.
        tail: Vec<Vec<f64>>,
    },
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Quadrature { .. }
                | Error::StepSizeUnderflow { .. }
                | Error::StepLimit { .. }
                | Error::NonFinite(_)
                | Error::Unresolved { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
