use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("negative input at node {index}: {value}")]
    NegativeInput { index: usize, value: f64 },

    #[error("negative density at step {step}, node {index}: {value}")]
    NegativeDensity { step: usize, index: usize, value: f64 },

    #[error("CFL violation at step {step}: dt*max|b|/dx = {courant}")]
    CflViolation { step: usize, courant: f64 },

    #[error("singular tridiagonal system at row {row}")]
    SingularTridiagonal { row: usize },

    #[error("control {value} outside [{min}, {max}]")]
    ControlOutOfRange { value: f64, min: f64, max: f64 },

    #[error("time grid mismatch: expected {expected} steps, found {found}")]
    TimeGridMismatch { expected: usize, found: usize },

    #[error("shift {shift} at step {step} exceeds margin {margin}")]
    ShiftOutOfDomain { step: usize, shift: f64, margin: f64 },

    #[error("inadmissible perturbation: {0}")]
    InadmissiblePerturbation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
