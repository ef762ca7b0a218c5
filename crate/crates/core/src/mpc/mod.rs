//! Parameterised MPC on a deterministic model: a soft-constrained
//! finite-horizon program solved by single shooting, with value, policy and
//! action-value extraction and finite-difference parameter gradients.
//!
//! Slacks are eliminated analytically (`sigma = max(h, 0)`), so the program
//! is a minimisation over the stacked inputs subject only to the input box.

mod scheme;
mod solver;
pub mod theta;

pub use scheme::{AffineConstraint, Dynamics, MpcScheme, QuadraticForm, Storage, DEFAULT_SLACK_WEIGHT};
pub use solver::{
    policy, q_value, solve_value, theta_gradient, write_trace_csv, GradientTarget, MpcSolution,
    SolveOptions, SolverStatus, ThetaGradient, SMOOTHING_SCHEDULE, STATIONARITY_TOL,
};
pub use theta::ThetaVector;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("theta: {0}")]
    Theta(String),
    #[error("input box is empty")]
    InfeasibleBox,
    #[error("query state has non-finite entries")]
    NonFiniteState,
    #[error("model produced non-finite values")]
    NonFiniteModel,
    #[error("pinned input {0:?} lies outside the input box")]
    InputOutOfBox(Vec<f64>),
    #[error("solver stopped with stationarity residual {:e}", .0.stationarity_residual)]
    MaxIterReached(Box<MpcSolution>),
}

impl MpcError {
    /// The best incumbent when the solver ran out of iterations.
    pub fn incumbent(&self) -> Option<&MpcSolution> {
        match self {
            MpcError::MaxIterReached(s) => Some(s),
            _ => None,
        }
    }
}
