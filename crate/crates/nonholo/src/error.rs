//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("syntax error at offset {offset}: expected {expected}, found {found}")]
    Syntax {
        offset: usize,
        expected: String,
        found: String,
    },

    #[error("unknown function `{name}` at offset {offset}")]
    UnknownFunction { name: String, offset: usize },

    #[error("unbound variable `{name}`")]
    UnboundVariable { name: String },

    #[error("duplicate binding `{name}`")]
    DuplicateBinding { name: String },

    #[error("domain error in `{expr}`: {reason}")]
    Domain { expr: String, reason: String },

    /// Velocity Hessian of the adjoined Lagrangian is (numerically) singular.
    #[error("degenerate Legendre transform: velocity Hessian condition estimate {cond:.3e}")]
    DegenerateLegendre { cond: f64 },

    #[error("{context}: no convergence after {iters} iterations (residual {residual:.3e})")]
    NoConvergence {
        context: &'static str,
        iters: u32,
        residual: f64,
    },

    /// The multiplier did not appear in the consistency chain by depth 2.
    #[error("constraint {index} consistency chain exceeds depth 2")]
    ChainTooDeep { index: usize },

    #[error("singular multiplier consistency system (condition estimate {cond:.3e})")]
    SingularConsistency { cond: f64 },

    #[error("singular mass matrix")]
    SingularMass,

    #[error("singular constraint block in the Lagrange-d'Alembert solve")]
    SingularConstraintBlock,

    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("constraint violated: {detail}")]
    ConstraintViolated { detail: String },

    #[error("schema error at {pointer}: {detail}")]
    Schema { pointer: String, detail: String },

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("maximum step count exceeded at t={t}")]
    MaxStepsExceeded { t: f64 },

    #[error("step size underflow at t={t}")]
    StepUnderflow { t: f64 },

    #[error("constraint drift {residual:.3e} exceeded abort threshold {threshold:.3e} at t={t}")]
    DriftAbort {
        t: f64,
        residual: f64,
        threshold: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
