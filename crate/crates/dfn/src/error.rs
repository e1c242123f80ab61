//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A physical or model parameter violates its precondition.
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    /// A material function was queried outside its validated range.
    #[error("{curve}: argument {value} outside validated range [{lo}, {hi}]")]
    DomainError {
        curve: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// Particle surface concentration left [0, c_s_max] at a node.
    #[error("particle saturation at node {node}: c_s_surf = {value}, admissible [0, {max}]")]
    Saturation { node: usize, value: f64, max: f64 },

    /// The nondimensional overpotential exceeded the sinh overflow cap.
    #[error("kinetics diverged at node {node}: |F eta / 2RT| = {arg} exceeds cap {cap}")]
    DivergedKinetics { node: usize, arg: f64, cap: f64 },

    /// Electrolyte concentration became non-positive at a quadrature point.
    #[error("non-positive electrolyte concentration in element {element}: c_e = {value}")]
    SingularLog { element: usize, value: f64 },

    /// Block sizes or index maps are inconsistent.
    #[error("structural error: {0}")]
    Structural(String),

    /// Sparse or dense factorization failed.
    #[error("linear solver failure: {0}")]
    LinearSolver(String),

    /// A Newton step did not converge within the iteration cap.
    #[error("time step {step} failed to converge: residual norm {residual:.3e} after {iterations} iterations")]
    StepFailed {
        step: usize,
        residual: f64,
        iterations: usize,
    },

    /// The algebraic initialization solve diverged.
    #[error("initialization failed: {0}")]
    InitFailed(String),

    /// A forward run aborted; the partial tape is kept by the caller for diagnosis.
    #[error("forward run failed at step {step}: {reason}")]
    ForwardFailed { step: usize, reason: String },

    /// Adjoint sweep failure, naming the offending step.
    #[error("adjoint solve failed at step {step}: {reason}")]
    AdjointFailed { step: usize, reason: String },

    /// Identification aborted after repeated objective failures.
    #[error("identification failed: {0}")]
    IdentificationFailed(String),

    /// Configuration file problems (missing keys, bad values, unreadable files).
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
