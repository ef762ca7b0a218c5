//! Cost-modified undiscounted optimal control problems that reproduce the
//! optimal policy and value functions of discounted or undiscounted MDPs,
//! even when built on an inexact model.

pub mod envs;
pub mod equivalence;
pub mod ext;
pub mod lqr;
pub mod mdp;
pub mod mpc;
pub mod optim;
pub mod random;
pub mod tuning;
