//! Reference environments: the optimal-investment benchmark with its closed
//! form, a stochastic inverted pendulum with a grid DP baseline, a linear
//! quadratic plant, and a seeded rollout engine.

pub mod investment;
pub mod pendulum;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lqr::matrix_rows;
use crate::random::InstanceRng;

pub use investment::{investment_closed_form, investment_mpc_value, InvestmentProblem};
pub use pendulum::{pendulum_dp, pendulum_scheme, GridDpBaseline, GridSpec, PendulumEnv};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("state {0:?} is outside the domain")]
    Domain(Vec<f64>),
    #[error("expected {expected} entries, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite state or input")]
    NonFinite,
    #[error("policy failed: {0}")]
    Policy(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("step {step}: {source}")]
pub struct RolloutError {
    pub step: usize,
    pub source: EnvError,
}

/// A stochastic plant `s+ ~ P(. | s, a)` with a stage cost.
pub trait Environment: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn input_lower(&self) -> Vec<f64>;
    fn input_upper(&self) -> Vec<f64>;
    /// Successor and stage cost `l(s, a)`.
    fn step(&self, s: &[f64], a: &[f64], rng: &mut InstanceRng) -> Result<(Vec<f64>, f64), EnvError>;
    /// Nonnegative constraint-violation measure of a state.
    fn violation(&self, _s: &[f64]) -> f64 {
        0.0
    }
}

/// Clips `a` to the box, warning when it had to.
pub fn clip_input(a: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    let out: Vec<f64> = a
        .iter()
        .zip(lower.iter().zip(upper))
        .map(|(&v, (&lo, &hi))| v.clamp(lo, hi))
        .collect();
    if out != a {
        log::warn!("input {a:?} clipped to {out:?}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub discounted_cost: f64,
    /// Largest state violation along the trajectory.
    pub violation: f64,
    pub trajectory: Trajectory,
}

/// Runs `policy` for `steps` steps, accumulating `sum gamma^k l_k`.
pub fn rollout<E, P>(
    env: &E,
    mut policy: P,
    s0: &[f64],
    steps: usize,
    gamma: f64,
    rng: &mut InstanceRng,
) -> Result<RolloutResult, RolloutError>
where
    E: Environment + ?Sized,
    P: FnMut(&[f64]) -> Result<Vec<f64>, EnvError>,
{
    let mut s = s0.to_vec();
    let mut traj = Trajectory {
        states: vec![s.clone()],
        inputs: Vec::with_capacity(steps),
        costs: Vec::with_capacity(steps),
    };
    let mut total = 0.0;
    let mut weight = 1.0;
    let mut violation = env.violation(&s);
    for step in 0..steps {
        let fail = |source| RolloutError { step, source };
        let a = policy(&s).map_err(fail)?;
        let (next, cost) = env.step(&s, &a, rng).map_err(fail)?;
        total += weight * cost;
        weight *= gamma;
        violation = violation.max(env.violation(&next));
        traj.inputs.push(a);
        traj.costs.push(cost);
        traj.states.push(next.clone());
        s = next;
    }
    Ok(RolloutResult {
        discounted_cost: total,
        violation,
        trajectory: traj,
    })
}

/// `s+ = A s + B a + noise_std * w`, `w ~ N(0, I)`, with cost
/// `s'Qs + a'Ra`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearEnv {
    #[serde(with = "matrix_rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub q: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub r: DMatrix<f64>,
    pub noise_std: f64,
    #[serde(with = "crate::ext::signed_ext_vec")]
    pub input_lower: Vec<f64>,
    #[serde(with = "crate::ext::signed_ext_vec")]
    pub input_upper: Vec<f64>,
}

impl LinearEnv {
    /// Scalar plant with an unbounded input.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64, noise_std: f64) -> Self {
        let one = |v| DMatrix::from_element(1, 1, v);
        LinearEnv {
            a: one(a),
            b: one(b),
            q: one(q),
            r: one(r),
            noise_std,
            input_lower: vec![f64::NEG_INFINITY],
            input_upper: vec![f64::INFINITY],
        }
    }
}

impl Environment for LinearEnv {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn input_lower(&self) -> Vec<f64> {
        self.input_lower.clone()
    }

    fn input_upper(&self) -> Vec<f64> {
        self.input_upper.clone()
    }

    fn step(&self, s: &[f64], a: &[f64], rng: &mut InstanceRng) -> Result<(Vec<f64>, f64), EnvError> {
        let (n, m) = (self.state_dim(), self.input_dim());
        if s.len() != n {
            return Err(EnvError::Shape { expected: n, got: s.len() });
        }
        if a.len() != m {
            return Err(EnvError::Shape { expected: m, got: a.len() });
        }
        let a = clip_input(a, &self.input_lower, &self.input_upper);
        let sv = DVector::from_column_slice(s);
        let av = DVector::from_column_slice(&a);
        let cost = sv.dot(&(&self.q * &sv)) + av.dot(&(&self.r * &av));
        let mut next = &self.a * &sv + &self.b * &av;
        if self.noise_std > 0.0 {
            for v in next.iter_mut() {
                let w: f64 = StandardNormal.sample(rng);
                *v += self.noise_std * w;
            }
        }
        if !cost.is_finite() || next.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::NonFinite);
        }
        Ok((next.as_slice().to_vec(), cost))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::rng;

    #[test]
    fn empty_rollout_and_determinism() {
        let env = LinearEnv::scalar(0.9, 1.0, 1.0, 0.5, 0.1);
        let r = rollout(&env, |s| Ok(vec![-0.3 * s[0]]), &[1.0], 0, 0.9, &mut rng(1)).unwrap();
        assert_eq!(r.discounted_cost, 0.0);
        assert_eq!(r.trajectory.states, vec![vec![1.0]]);
        let run = || rollout(&env, |s| Ok(vec![-0.3 * s[0]]), &[1.0], 30, 0.9, &mut rng(7)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_cost_plant_costs_nothing() {
        let env = LinearEnv::scalar(1.1, 1.0, 0.0, 0.0, 1.0);
        let r = rollout(&env, |_| Ok(vec![2.0]), &[0.5], 25, 0.95, &mut rng(3)).unwrap();
        assert_eq!(r.discounted_cost, 0.0);
    }

    #[test]
    fn policy_error_reports_the_step() {
        let env = LinearEnv::scalar(1.0, 1.0, 1.0, 1.0, 0.0);
        let mut k = 0;
        let err = rollout(
            &env,
            |_| {
                k += 1;
                if k == 3 {
                    Err(EnvError::Policy("boom".into()))
                } else {
                    Ok(vec![0.0])
                }
            },
            &[1.0],
            5,
            1.0,
            &mut rng(0),
        )
        .unwrap_err();
        assert_eq!(err.step, 2);
    }
}
