//! Finite-state, finite-action MDPs and their exact dynamic-programming
//! solutions under discounted, gain-optimal and bias-optimal criteria.
//!
//! Values are costs (lower is better). A stage cost of `+inf` forbids the
//! corresponding state/action pair.

use crate::ext::{self, argmin, expectation, span, sup_dist};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rows of a transition table must sum to one within this tolerance.
pub const DISTRIBUTION_TOL: f64 = 1e-12;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Mixing weight of the aperiodicity transform used by relative value
/// iteration: `h <- (1 - w) h + w T h`. Fixed points are unchanged.
const APERIODICITY_WEIGHT: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("discount factor {0} outside (0, 1]")]
    InvalidDiscount(f64),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("closed-loop linear system is numerically singular")]
    SingularSystem,
    #[error("per-state gain estimates differ by {spread:e}")]
    GainNotConstant { spread: f64 },
    #[error("optimal gain {0:e} is not zero; shift the stage cost first")]
    NonzeroGain(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("transition row ({state}, {action}) is not a distribution (sum {sum})")]
    InvalidDistribution { state: usize, action: usize, sum: f64 },
    #[error("state {0} has no action with finite stage cost")]
    NoFiniteAction(usize),
}

/// Finite MDP `(P, l, gamma)` with `P[s][a][s']` and `l[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMdp", into = "RawMdp")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
    stage_cost: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
    #[serde(with = "ext::ext_table")]
    stage_cost: Vec<Vec<f64>>,
}

impl TryFrom<RawMdp> for TabularMdp {
    type Error = MdpError;
    fn try_from(raw: RawMdp) -> Result<Self, MdpError> {
        let mdp = TabularMdp::new(raw.transition, raw.stage_cost, raw.gamma)?;
        if mdp.n_states != raw.n_states || mdp.n_actions != raw.n_actions {
            return Err(MdpError::ShapeMismatch(format!(
                "declared {}x{}, tables are {}x{}",
                raw.n_states, raw.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(mdp)
    }
}

impl From<TabularMdp> for RawMdp {
    fn from(m: TabularMdp) -> Self {
        RawMdp {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            transition: m.transition,
            stage_cost: m.stage_cost,
        }
    }
}

/// Checks that `transition` is an `n x m x n` table of distributions.
pub(crate) fn validate_transition(
    transition: &[Vec<Vec<f64>>],
    n_states: usize,
    n_actions: usize,
) -> Result<(), MdpError> {
    if transition.len() != n_states {
        return Err(MdpError::ShapeMismatch(format!(
            "transition has {} states, expected {n_states}",
            transition.len()
        )));
    }
    for (s, rows) in transition.iter().enumerate() {
        if rows.len() != n_actions {
            return Err(MdpError::ShapeMismatch(format!(
                "transition[{s}] has {} actions, expected {n_actions}",
                rows.len()
            )));
        }
        for (a, row) in rows.iter().enumerate() {
            if row.len() != n_states {
                return Err(MdpError::ShapeMismatch(format!(
                    "transition[{s}][{a}] has {} successors, expected {n_states}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite())
                || (sum - 1.0).abs() > DISTRIBUTION_TOL
            {
                return Err(MdpError::InvalidDistribution { state: s, action: a, sum });
            }
        }
    }
    Ok(())
}

impl TabularMdp {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        stage_cost: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self, MdpError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(MdpError::InvalidDiscount(gamma));
        }
        let n_states = stage_cost.len();
        if n_states == 0 {
            return Err(MdpError::ShapeMismatch("no states".into()));
        }
        let n_actions = stage_cost[0].len();
        if n_actions == 0 {
            return Err(MdpError::ShapeMismatch("no actions".into()));
        }
        for (s, row) in stage_cost.iter().enumerate() {
            if row.len() != n_actions {
                return Err(MdpError::ShapeMismatch(format!(
                    "stage_cost[{s}] has {} actions, expected {n_actions}",
                    row.len()
                )));
            }
            if row.iter().any(|x| x.is_nan() || *x == f64::NEG_INFINITY) {
                return Err(MdpError::ShapeMismatch(format!(
                    "stage_cost[{s}] contains NaN or -inf"
                )));
            }
            if row.iter().all(|x| !x.is_finite()) {
                return Err(MdpError::NoFiniteAction(s));
            }
        }
        validate_transition(&transition, n_states, n_actions)?;
        Ok(TabularMdp {
            n_states,
            n_actions,
            gamma,
            transition,
            stage_cost,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self) -> &[Vec<Vec<f64>>] {
        &self.transition
    }

    pub fn stage_cost(&self) -> &[Vec<f64>] {
        &self.stage_cost
    }

    /// Same dynamics and costs under another discount factor.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self, MdpError> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(MdpError::InvalidDiscount(gamma));
        }
        Ok(TabularMdp { gamma, ..self.clone() })
    }

    /// The Bellman optimality operator `(T v)(s) = min_a Q_v(s, a)`.
    pub fn bellman(&self, v: &[f64]) -> Vec<f64> {
        self.bellman_greedy(v).0
    }

    fn bellman_greedy(&self, v: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let mut out = Vec::with_capacity(self.n_states);
        let mut pol = Vec::with_capacity(self.n_states);
        let mut q_row = vec![0.0; self.n_actions];
        for s in 0..self.n_states {
            for (a, q) in q_row.iter_mut().enumerate() {
                *q = self.q_entry(s, a, v);
            }
            let (a, q) = argmin(&q_row).unwrap_or((0, f64::INFINITY));
            out.push(q);
            pol.push(a);
        }
        (out, pol)
    }

    fn q_entry(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        let cost = self.stage_cost[s][a];
        if cost == f64::INFINITY {
            return f64::INFINITY;
        }
        cost + self.gamma * expectation(&self.transition[s][a], v)
    }
}

/// Optimal value, action-value and advantage tables with the greedy policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSolution {
    #[serde(with = "ext::ext_vec")]
    pub v: Vec<f64>,
    #[serde(with = "ext::ext_table")]
    pub q: Vec<Vec<f64>>,
    #[serde(with = "ext::ext_table")]
    pub advantage: Vec<Vec<f64>>,
    pub policy: Vec<usize>,
    pub bellman_residual: f64,
    pub gamma_used: f64,
    pub iterations: usize,
}

impl DpSolution {
    /// Builds `Q`, `A` and the greedy policy from a value vector, recording
    /// the sup-norm Bellman residual of `v`.
    pub fn from_values(mdp: &TabularMdp, v: Vec<f64>, iterations: usize) -> DpSolution {
        let q = q_from_v(mdp, &v);
        let mut policy = Vec::with_capacity(mdp.n_states);
        let mut residual: f64 = 0.0;
        for (s, row) in q.iter().enumerate() {
            let (a, best) = argmin(row).unwrap_or((0, f64::INFINITY));
            policy.push(a);
            residual = residual.max(ext::ext_diff(best, v[s]));
        }
        let advantage = q
            .iter()
            .zip(&v)
            .map(|(row, &vs)| {
                row.iter()
                    .map(|&x| if x == f64::INFINITY { x } else { x - vs })
                    .collect()
            })
            .collect();
        DpSolution {
            v,
            q,
            advantage,
            policy,
            bellman_residual: residual,
            gamma_used: mdp.gamma,
            iterations,
        }
    }
}

/// Optimal long-run average cost, bias values (with `bias[0] = 0`) and policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageCostSolution {
    pub gain: f64,
    pub bias: Vec<f64>,
    pub policy: Vec<usize>,
    pub residual: f64,
    pub iterations: usize,
}

/// `Q[s][a] = l[s][a] + gamma * E[v(s+)]`, `+inf` exactly where `l` is.
pub fn q_from_v(mdp: &TabularMdp, v: &[f64]) -> Vec<Vec<f64>> {
    (0..mdp.n_states)
        .map(|s| (0..mdp.n_actions).map(|a| mdp.q_entry(s, a, v)).collect())
        .collect()
}

/// Copy of `mdp` with `l'[s][a] = l[s][a] - gain`.
pub fn shift_stage_cost(mdp: &TabularMdp, gain: f64) -> TabularMdp {
    let stage_cost = mdp
        .stage_cost
        .iter()
        .map(|row| {
            row.iter()
                .map(|&x| if x == f64::INFINITY { x } else { x - gain })
                .collect()
        })
        .collect();
    TabularMdp {
        stage_cost,
        ..mdp.clone()
    }
}

/// Optimal values by successive approximation.
///
/// For `gamma < 1` the iteration stops once `||T v - v||_inf <= tol`. For
/// `gamma = 1` the stage cost must already be gain-shifted; the bias values
/// from [`relative_value_iteration`] are returned and the residual is the
/// span of `T h - h`.
pub fn value_iteration(
    mdp: &TabularMdp,
    tol: f64,
    max_iter: usize,
) -> Result<DpSolution, MdpError> {
    if !(mdp.gamma > 0.0 && mdp.gamma <= 1.0) {
        return Err(MdpError::InvalidDiscount(mdp.gamma));
    }
    if mdp.gamma == 1.0 {
        let avg = relative_value_iteration(mdp, tol, max_iter)?;
        if avg.gain.abs() > 10.0 * tol {
            return Err(MdpError::NonzeroGain(avg.gain));
        }
        let mut sol = DpSolution::from_values(mdp, avg.bias, avg.iterations);
        sol.bellman_residual = sol.bellman_residual.max(avg.residual);
        return Ok(sol);
    }
    let mut v = vec![0.0; mdp.n_states];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let tv = mdp.bellman(&v);
        residual = sup_dist(&tv, &v);
        v = tv;
        if residual <= tol {
            return Ok(DpSolution::from_values(mdp, v, it));
        }
    }
    Err(MdpError::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// States that can reach, with positive probability, a pair whose selected
/// cost is infinite under `policy`.
fn infinite_cost_closure(mdp: &TabularMdp, policy: &[usize]) -> Vec<bool> {
    let n = mdp.n_states;
    let mut bad: Vec<bool> = (0..n)
        .map(|s| mdp.stage_cost[s][policy[s]] == f64::INFINITY)
        .collect();
    loop {
        let mut changed = false;
        for s in 0..n {
            if bad[s] {
                continue;
            }
            let row = &mdp.transition[s][policy[s]];
            if row.iter().zip(&bad).any(|(&p, &b)| p > 0.0 && b) {
                bad[s] = true;
                changed = true;
            }
        }
        if !changed {
            return bad;
        }
    }
}

/// Exact closed-loop value of a deterministic policy.
///
/// With `gamma < 1` this is the solution of `(I - gamma P_pi) v = l_pi`;
/// states that can reach an infinite-cost pair get `+inf`. With `gamma = 1`
/// the policy must have zero gain and the relative values (`v[0] = 0`) are
/// returned.
pub fn policy_evaluation(mdp: &TabularMdp, policy: &[usize]) -> Result<Vec<f64>, MdpError> {
    if policy.len() != mdp.n_states || policy.iter().any(|&a| a >= mdp.n_actions) {
        return Err(MdpError::ShapeMismatch("policy does not fit the MDP".into()));
    }
    if mdp.gamma == 1.0 {
        let (gain, bias) = policy_gain_bias(mdp, policy)?;
        if gain.abs() > 1e-8 {
            return Err(MdpError::NonzeroGain(gain));
        }
        return Ok(bias);
    }
    let bad = infinite_cost_closure(mdp, policy);
    let idx: Vec<usize> = (0..mdp.n_states).filter(|&s| !bad[s]).collect();
    let k = idx.len();
    let mut m = DMatrix::<f64>::identity(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for (i, &s) in idx.iter().enumerate() {
        let a = policy[s];
        rhs[i] = mdp.stage_cost[s][a];
        for (j, &t) in idx.iter().enumerate() {
            m[(i, j)] -= mdp.gamma * mdp.transition[s][a][t];
        }
    }
    let sol = solve_checked(m, rhs)?;
    let mut v = vec![f64::INFINITY; mdp.n_states];
    for (i, &s) in idx.iter().enumerate() {
        v[s] = sol[i];
    }
    Ok(v)
}

/// Average cost and bias (`bias[0] = 0`) of a unichain policy with finite
/// costs, from `h + g 1 = l_pi + P_pi h`.
pub fn policy_gain_bias(mdp: &TabularMdp, policy: &[usize]) -> Result<(f64, Vec<f64>), MdpError> {
    let n = mdp.n_states;
    if policy.iter().enumerate().any(|(s, &a)| !mdp.stage_cost[s][a].is_finite()) {
        return Err(MdpError::ShapeMismatch(
            "relative evaluation needs finite selected costs".into(),
        ));
    }
    // Unknowns: h[1..n] and g (in slot 0).
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for s in 0..n {
        let a = policy[s];
        rhs[s] = mdp.stage_cost[s][a];
        m[(s, 0)] = 1.0;
        for t in 1..n {
            let delta = if s == t { 1.0 } else { 0.0 };
            m[(s, t)] = delta - mdp.transition[s][a][t];
        }
    }
    let sol = solve_checked(m, rhs)?;
    let gain = sol[0];
    let mut bias = vec![0.0; n];
    bias[1..n].copy_from_slice(&sol.as_slice()[1..n]);
    Ok((gain, bias))
}

fn solve_checked(m: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>, MdpError> {
    let k = m.nrows();
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    let lu = m.clone().lu();
    let sol = lu.solve(&rhs).ok_or(MdpError::SingularSystem)?;
    if sol.iter().any(|x| !x.is_finite()) {
        return Err(MdpError::SingularSystem);
    }
    // Reject results whose backward error is far above rounding level.
    let resid = (&m * &sol - &rhs).amax();
    let scale = 1.0 + rhs.amax() + m.amax() * sol.amax();
    if resid > 1e-8 * scale {
        return Err(MdpError::SingularSystem);
    }
    Ok(sol)
}

/// Relative value iteration for the average-cost criterion.
///
/// Iterates `h <- (1 - w) h + w T h`, renormalised so that `h[0] = 0`, until
/// the span of `T h - h` is at most `tol`. The gain is the midpoint of
/// `T h - h`; the bias is `h`.
pub fn relative_value_iteration(
    mdp: &TabularMdp,
    tol: f64,
    max_iter: usize,
) -> Result<AverageCostSolution, MdpError> {
    let undiscounted = mdp.with_gamma(1.0)?;
    let n = mdp.n_states;
    let mut h = vec![0.0; n];
    let mut prev_diff: Option<Vec<f64>> = None;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let (th, policy) = undiscounted.bellman_greedy(&h);
        if th.iter().any(|x| !x.is_finite()) {
            return Err(MdpError::NonConvergence {
                iterations: it,
                residual: f64::INFINITY,
            });
        }
        let diff: Vec<f64> = th.iter().zip(&h).map(|(a, b)| a - b).collect();
        residual = span(&diff);
        if residual <= tol {
            let lo = diff.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            return Ok(AverageCostSolution {
                gain: 0.5 * (lo + hi),
                bias: h,
                policy,
                residual,
                iterations: it,
            });
        }
        if let Some(prev) = &prev_diff {
            // Gain estimates settled on distinct values: multichain instance.
            if sup_dist(prev, &diff) <= 0.1 * tol && residual > 10.0 * tol {
                return Err(MdpError::GainNotConstant { spread: residual });
            }
        }
        prev_diff = Some(diff);
        let w = APERIODICITY_WEIGHT;
        for (hs, &ts) in h.iter_mut().zip(&th) {
            *hs = (1.0 - w) * *hs + w * ts;
        }
        let h0 = h[0];
        h.iter_mut().for_each(|x| *x -= h0);
    }
    Err(MdpError::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(cost: f64, gamma: f64) -> TabularMdp {
        TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![cost]], gamma).unwrap()
    }

    #[test]
    fn geometric_series_single_state() {
        let sol = value_iteration(&single(1.0, 0.9), 1e-12, 10_000).unwrap();
        assert!((sol.v[0] - 10.0).abs() < 1e-10);
        assert!(sol.advantage[0][0].abs() < 1e-10);
    }

    #[test]
    fn absorbing_policy_evaluation() {
        let v = policy_evaluation(&single(2.0, 0.5), &[0]).unwrap();
        assert!((v[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn constant_cost_average() {
        let sol = relative_value_iteration(&single(3.0, 1.0), 1e-12, 1_000).unwrap();
        assert!((sol.gain - 3.0).abs() < 1e-12);
        assert_eq!(sol.bias, vec![0.0]);
    }

    #[test]
    fn symmetric_two_state_gain() {
        let u = vec![0.5, 0.5];
        let p = vec![vec![u.clone(), u.clone()], vec![u.clone(), u]];
        let mdp = TabularMdp::new(p, vec![vec![1.0, 1.0], vec![3.0, 3.0]], 1.0).unwrap();
        let sol = relative_value_iteration(&mdp, 1e-12, 10_000).unwrap();
        assert!((sol.gain - 2.0).abs() < 1e-10);
    }

    #[test]
    fn shift_identity_and_cancellation() {
        let mdp = single(5.0, 0.9);
        assert_eq!(shift_stage_cost(&mdp, 0.0), mdp);
        assert_eq!(shift_stage_cost(&mdp, 5.0).stage_cost()[0][0], 0.0);
        let p = vec![vec![vec![1.0], vec![1.0]]];
        let m2 = TabularMdp::new(p, vec![vec![1.0, f64::INFINITY]], 0.9).unwrap();
        assert_eq!(shift_stage_cost(&m2, 1.0).stage_cost()[0][1], f64::INFINITY);
    }

    #[test]
    fn q_from_zero_and_constant_values() {
        let p = vec![vec![vec![0.3, 0.7], vec![1.0, 0.0]], vec![vec![0.0, 1.0], vec![0.5, 0.5]]];
        let cost = vec![vec![1.0, f64::INFINITY], vec![2.0, 0.5]];
        let mdp = TabularMdp::new(p, cost.clone(), 0.5).unwrap();
        assert_eq!(q_from_v(&mdp, &[0.0, 0.0]), cost);
        let q = q_from_v(&mdp, &[4.0, 4.0]);
        assert_eq!(q[0][0], 3.0);
        assert_eq!(q[0][1], f64::INFINITY);
        assert_eq!(q[1][1], 2.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(
            TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![1.0]], 0.0),
            Err(MdpError::InvalidDiscount(0.0))
        );
        assert!(matches!(
            TabularMdp::new(vec![vec![vec![0.9]]], vec![vec![1.0]], 0.5),
            Err(MdpError::InvalidDistribution { .. })
        ));
        assert_eq!(
            TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![f64::INFINITY]], 0.5),
            Err(MdpError::NoFiniteAction(0))
        );
    }

    #[test]
    fn nonconvergence_is_reported() {
        let err = value_iteration(&single(1.0, 0.99), 1e-14, 5).unwrap_err();
        assert!(matches!(err, MdpError::NonConvergence { iterations: 5, .. }));
    }

    #[test]
    fn multichain_gain_detected() {
        // Two absorbing states with different costs.
        let p = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]];
        let mdp = TabularMdp::new(p, vec![vec![1.0], vec![2.0]], 1.0).unwrap();
        let err = relative_value_iteration(&mdp, 1e-10, 10_000).unwrap_err();
        assert!(matches!(err, MdpError::GainNotConstant { .. }), "{err:?}");
    }

    #[test]
    fn infinite_cost_pairs_propagate_in_evaluation() {
        let p = vec![
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ];
        let cost = vec![vec![1.0, 1.0], vec![f64::INFINITY, 2.0]];
        let mdp = TabularMdp::new(p, cost, 0.5).unwrap();
        let v = policy_evaluation(&mdp, &[0, 0]).unwrap();
        assert_eq!(v, vec![f64::INFINITY, f64::INFINITY]);
        let v = policy_evaluation(&mdp, &[1, 1]).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12 && (v[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn json_roundtrip_with_infinity() {
        let p = vec![vec![vec![1.0], vec![1.0]]];
        let mdp = TabularMdp::new(p, vec![vec![1.0, f64::INFINITY]], 0.9).unwrap();
        let json = serde_json::to_string(&mdp).unwrap();
        assert!(json.contains("\"inf\""));
        let back: TabularMdp = serde_json::from_str(&json).unwrap();
        assert_eq!(back, mdp);
        let bad = json.replace("\"n_actions\":2", "\"n_actions\":3");
        assert!(serde_json::from_str::<TabularMdp>(&bad).is_err());
    }
}
