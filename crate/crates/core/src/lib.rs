//! Numerical laboratory for trace dynamics.
//!
//! Classical matrix-model dynamics with graded (Grassmann) entries, trace
//! polynomials and their derivatives, the canonical ensemble with its Ward
//! identities, and stochastic collapse equations for state vectors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collapse;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod grassmann;
pub mod matrix;
pub mod parallel;
pub mod stats;
pub mod trace;

pub use error::{Error, Result};
pub use grassmann::GrassmannElement;
pub use matrix::{i_eff, eff_project, Kind, MatrixValue, Parity, PhaseState, Roster, VariableSpec};
pub use parallel::Execution;
pub use trace::{MatrixPolynomial, Registry, TracePolynomial, TraceWord};
