use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("velocity {velocity:?} is not lattice-commensurate (nearest commensurate value {suggestion:?})")]
    NonCommensurate {
        velocity: Vec<f64>,
        suggestion: Vec<f64>,
    },

    #[error("duplicate velocities for potentials {first} and {second}")]
    DuplicateVelocity { first: usize, second: usize },

    #[error("eigensolver did not converge after {iterations} iterations (last residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("eigenvalue {eigenvalue:.6} lies inside the threshold gap (-{gap_tol}, 0)")]
    NearThreshold { eigenvalue: f64, gap_tol: f64 },

    #[error("propagation failed at step {step}: {reason}")]
    Propagation { step: usize, reason: String },

    #[error("instability at step {step}: norm {norm:.3e} exceeds {limit:.1e}")]
    Instability { step: usize, norm: f64, limit: f64 },

    #[error("scattering-state preparation failed: {0}")]
    Preparation(String),

    #[error("time horizon {horizon} exceeds the wrap-safe window {safe}")]
    Horizon { horizon: f64, safe: f64 },

    #[error("contract violation: {0}")]
    Contract(String),
}
