use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("time {t} outside admissible range [{lo}, {hi}] for {what}")]
    Range { what: String, t: f64, lo: f64, hi: f64 },

    #[error("Riccati solution exceeded {threshold:e} at t = {time}")]
    RiccatiBlowUp { time: f64, threshold: f64 },

    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("controllability failure: {0}")]
    Controllability(String),

    #[error(
        "requested covariance is below the delay threshold (min eigenvalue of target - threshold = {min_eigenvalue:e})"
    )]
    BelowThreshold { min_eigenvalue: f64 },

    #[error("shooting did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence {
        residual: f64,
        iterations: usize,
        best: Box<crate::steering::ShootingResult>,
    },

    #[error("full-actuation precondition failed at t = {time}: min singular value {min_singular_value:e}")]
    FullActuation { time: f64, min_singular_value: f64 },

    #[error("closed-loop generator is not normal (commutator norm {commutator:e})")]
    NotNormal { commutator: f64 },

    #[error("control history does not cover [{needed_from}, {needed_to}]")]
    History { needed_from: f64, needed_to: f64 },

    #[error("simulation diverged on path {path} at t = {time}")]
    Divergence { path: usize, time: f64 },

    #[error("grid mismatch: {0}")]
    Grid(String),
}
