//! Constrained classical dynamics in extended phase space.
//!
//! A system is declared as expressions: a Lagrangian plus equality
//! constraints, holonomic or velocity-dependent. The engine adjoins the
//! constraints with Lagrange multipliers, Legendre-transforms to phase
//! space with exact forward-mode derivatives, and integrates the
//! extended Hamilton equations two ways:
//!
//! * `dirac`: the classic multiplier-adjoined flow with the usual
//!   transposition rule. Correct for holonomic and integrable
//!   constraints; demonstrably wrong for non-integrable rolling.
//! * `flannery`: the same flow corrected by the generalized
//!   transposition tensor `f` (solved from `A f = G` at every state),
//!   which stays on the accepted dynamics for general velocity
//!   constraints.
//!
//! An independent configuration-space Lagrange-d'Alembert integrator
//! (`oracle`) provides reference trajectories for cross-validation, and
//! generalized brackets evaluate observable rates along either flow.
//!
//! Everything is deterministic (no randomness outside seeded test
//! sampling) and all core types are immutable owned data, safe to share
//! across threads. See the `cli` module (or the `nonholo` binary) for
//! the command-line surface and `check` for the runtime invariant suite.

pub mod brackets;
pub mod check;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod integrate;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod scenarios;
pub mod sim;

pub use error::{Error, Result};
