//! Undiscounted OCPs on a wrong model whose costs are modified so that they
//! reproduce the optimal value, action-value and policy of the real MDP.
//!
//! Given the real solution `(V*, Q*)` and a model transition `P^`, the
//! modified costs are
//!
//! ```text
//! T^(s)    = V*(s)
//! L^(s, a) = Q*(s, a) - E_P^[V*(s+) | s, a]   where that expectation is finite
//!          = +inf                             otherwise
//! ```
//!
//! With these, backward induction on the model returns `V*`, `Q*` and `pi*`
//! at every horizon, and the terminal-cost-free infinite-horizon problem
//! returns them shifted by the constant `v_inf = lim E[V*(s^_k)]`.

use crate::ext::{self, argmin, expectation, span};
use crate::mdp::{self, DpSolution, MdpError, TabularMdp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Argmin margins below this count as ties.
pub const TIE_MARGIN: f64 = 1e-7;

const APERIODICITY_WEIGHT: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquivalenceError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every action at state {0} has infinite modified stage cost")]
    AllActionsInfeasible(usize),
    #[error("closed-loop expectation did not converge within {iterations} steps (last change {change:e})")]
    NoConvergence { iterations: usize, change: f64 },
    #[error("limit depends on the start state (spread {spread:e})")]
    StartStateDependent { spread: f64 },
    #[error("the set of recoverable states is empty")]
    EmptySet,
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Transition table of the (possibly wrong) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<Vec<f64>>>", into = "Vec<Vec<Vec<f64>>>")]
pub struct ModelTransition {
    transition: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<Vec<Vec<Vec<f64>>>> for ModelTransition {
    type Error = MdpError;
    fn try_from(t: Vec<Vec<Vec<f64>>>) -> Result<Self, MdpError> {
        ModelTransition::new(t)
    }
}

impl From<ModelTransition> for Vec<Vec<Vec<f64>>> {
    fn from(m: ModelTransition) -> Self {
        m.transition
    }
}

impl ModelTransition {
    pub fn new(transition: Vec<Vec<Vec<f64>>>) -> Result<Self, MdpError> {
        let n = transition.len();
        let m = transition.first().map_or(0, |r| r.len());
        if n == 0 || m == 0 {
            return Err(MdpError::ShapeMismatch("empty model".into()));
        }
        mdp::validate_transition(&transition, n, m)?;
        Ok(ModelTransition { transition })
    }

    /// The exact model of `mdp`.
    pub fn of(mdp: &TabularMdp) -> Self {
        ModelTransition {
            transition: mdp.transition().to_vec(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.transition.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transition[0].len()
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    pub fn table(&self) -> &[Vec<Vec<f64>>] {
        &self.transition
    }

    /// `w'(s) = E[w(s+) | s, policy(s)]`.
    pub fn closed_loop_apply(&self, policy: &[usize], w: &[f64]) -> Vec<f64> {
        (0..self.n_states())
            .map(|s| expectation(self.row(s, policy[s]), w))
            .collect()
    }
}

/// Model plus modified stage/terminal costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifiedOcp {
    pub model: ModelTransition,
    #[serde(with = "ext::ext_table")]
    pub stage_cost_hat: Vec<Vec<f64>>,
    #[serde(with = "ext::ext_vec")]
    pub terminal_cost_hat: Vec<f64>,
    pub feasible_mask: Vec<Vec<bool>>,
}

impl ModifiedOcp {
    pub fn n_states(&self) -> usize {
        self.model.n_states()
    }

    fn q_row(&self, s: usize, next: &[f64], out: &mut [f64]) {
        for (a, q) in out.iter_mut().enumerate() {
            let l = self.stage_cost_hat[s][a];
            *q = if l == f64::INFINITY {
                f64::INFINITY
            } else {
                l + expectation(self.model.row(s, a), next)
            };
        }
    }

    /// `Q(s, a) = L^(s, a) + E_P^[next(s+)]` for every pair.
    pub fn q_table(&self, next: &[f64]) -> Vec<Vec<f64>> {
        let m = self.model.n_actions();
        (0..self.n_states())
            .map(|s| {
                let mut row = vec![0.0; m];
                self.q_row(s, next, &mut row);
                row
            })
            .collect()
    }

    fn backup(&self, next: &[f64]) -> Result<(Vec<f64>, Vec<usize>), EquivalenceError> {
        let m = self.model.n_actions();
        let mut row = vec![0.0; m];
        let mut v = Vec::with_capacity(self.n_states());
        let mut pol = Vec::with_capacity(self.n_states());
        for s in 0..self.n_states() {
            self.q_row(s, next, &mut row);
            let (a, q) = argmin(&row).ok_or(EquivalenceError::AllActionsInfeasible(s))?;
            v.push(q);
            pol.push(a);
        }
        Ok((v, pol))
    }
}

/// Builds `T^ = V*` and `L^ = Q* - E_model[V*]` (infinite where that
/// expectation or `Q*` is infinite).
pub fn build_modified_costs(
    real: &DpSolution,
    model: &ModelTransition,
) -> Result<ModifiedOcp, EquivalenceError> {
    let n = model.n_states();
    let m = model.n_actions();
    if real.v.len() != n || real.q.len() != n || real.q.iter().any(|r| r.len() != m) {
        return Err(EquivalenceError::ShapeMismatch(format!(
            "solution is {}x{}, model is {n}x{m}",
            real.v.len(),
            real.q.first().map_or(0, |r| r.len())
        )));
    }
    let mut stage = vec![vec![f64::INFINITY; m]; n];
    let mut mask = vec![vec![false; m]; n];
    for s in 0..n {
        for a in 0..m {
            let ev = expectation(model.row(s, a), &real.v);
            let q = real.q[s][a];
            if ev.is_finite() && q.is_finite() {
                stage[s][a] = q - ev;
                mask[s][a] = true;
            }
        }
    }
    Ok(ModifiedOcp {
        model: model.clone(),
        stage_cost_hat: stage,
        terminal_cost_hat: real.v.clone(),
        feasible_mask: mask,
    })
}

/// Stagewise solution of the undiscounted finite-horizon OCP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteHorizonSolution {
    pub horizon: usize,
    /// `values_by_stage[k]` is the optimal cost-to-go with `k` stages left.
    pub values_by_stage: Vec<Vec<f64>>,
    /// `Q^_N`; absent for `N = 0`.
    pub q_hat: Option<Vec<Vec<f64>>>,
    /// Greedy first-stage policy; absent for `N = 0`.
    pub policy_hat: Option<Vec<usize>>,
}

impl FiniteHorizonSolution {
    pub fn value(&self) -> &[f64] {
        &self.values_by_stage[self.horizon]
    }
}

pub fn backward_induction(
    ocp: &ModifiedOcp,
    horizon: usize,
) -> Result<FiniteHorizonSolution, EquivalenceError> {
    let mut values = vec![ocp.terminal_cost_hat.clone()];
    let mut policy = None;
    for _ in 0..horizon {
        let (v, pol) = ocp.backup(values.last().unwrap())?;
        values.push(v);
        policy = Some(pol);
    }
    let q_hat = (horizon >= 1).then(|| ocp.q_table(&values[horizon - 1]));
    Ok(FiniteHorizonSolution {
        horizon,
        values_by_stage: values,
        q_hat,
        policy_hat: policy,
    })
}

/// `E_s[w(s^_k)]` for every start state `s`, for `k = 0..=steps`.
fn closed_loop_moments(
    model: &ModelTransition,
    policy: &[usize],
    w0: &[f64],
    steps: usize,
) -> Vec<Vec<f64>> {
    let mut out = vec![w0.to_vec()];
    for _ in 0..steps {
        let next = model.closed_loop_apply(policy, out.last().unwrap());
        out.push(next);
    }
    out
}

/// States from which the model's closed loop under `policy` keeps
/// `E[V*(s^_k)]` finite for all `k <= n_bar`.
pub fn estimate_s_set(
    ocp: &ModifiedOcp,
    real_policy: &[usize],
    v_star: &[f64],
    n_bar: usize,
) -> Vec<bool> {
    let moments = closed_loop_moments(&ocp.model, real_policy, v_star, n_bar);
    (0..ocp.n_states())
        .map(|s| moments.iter().all(|w| w[s].is_finite()))
        .collect()
}

/// Limit of `E[w(s^_k)]` along the model's closed loop, over the states in
/// `set` whose expectations stay finite. Converged when successive iterates
/// and the spread across start states are both within `tol`.
fn closed_loop_limit(
    model: &ModelTransition,
    policy: &[usize],
    w0: &[f64],
    set: &[bool],
    max_horizon: usize,
    tol: f64,
) -> Result<f64, EquivalenceError> {
    let mut alive: Vec<bool> = set.iter().zip(w0).map(|(&m, x)| m && x.is_finite()).collect();
    let mut w = w0.to_vec();
    let mut change = f64::INFINITY;
    for _ in 0..max_horizon {
        let next = model.closed_loop_apply(policy, &w);
        for (m, x) in alive.iter_mut().zip(&next) {
            *m &= x.is_finite();
        }
        if !alive.iter().any(|&m| m) {
            return Err(EquivalenceError::EmptySet);
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        change = 0.0;
        for s in (0..w.len()).filter(|&s| alive[s]) {
            change = change.max((next[s] - w[s]).abs());
            lo = lo.min(next[s]);
            hi = hi.max(next[s]);
        }
        let spread = hi - lo;
        w = next;
        if change <= tol && spread <= tol {
            return Ok(0.5 * (lo + hi));
        }
        if change <= 1e-3 * tol && spread > 10.0 * tol {
            return Err(EquivalenceError::StartStateDependent { spread });
        }
    }
    Err(EquivalenceError::NoConvergence {
        iterations: max_horizon,
        change,
    })
}

/// `v_inf = lim_k E[V*(s^_k)]` under the model closed loop with `pi*`.
pub fn estimate_v_infinity(
    ocp: &ModifiedOcp,
    real_policy: &[usize],
    v_star: &[f64],
    max_horizon: usize,
    tol: f64,
) -> Result<f64, EquivalenceError> {
    if !v_star.iter().any(|x| x.is_finite()) {
        return Err(EquivalenceError::EmptySet);
    }
    let all = vec![true; ocp.n_states()];
    closed_loop_limit(&ocp.model, real_policy, v_star, &all, max_horizon, tol)
}

/// Optimal value, action-value and policy of the terminal-cost-free
/// undiscounted OCP on the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfiniteHorizonSolution {
    pub v_hat: Vec<f64>,
    pub q_hat: Vec<Vec<f64>>,
    pub policy_hat: Vec<usize>,
    pub iterations: usize,
    pub residual: f64,
}

/// Span-seminorm value iteration on `L^`, then shifted so that the limit of
/// `E[V^_inf(s^_k)]` along its own closed loop is zero, which is the
/// normalisation implied by summing `L^` over an unbounded horizon.
pub fn infinite_horizon_solution(
    ocp: &ModifiedOcp,
    tol: f64,
    max_iter: usize,
) -> Result<InfiniteHorizonSolution, EquivalenceError> {
    let n = ocp.n_states();
    let mut h = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let (th, policy) = ocp.backup(&h)?;
        let diff: Vec<f64> = th.iter().zip(&h).map(|(a, b)| a - b).collect();
        residual = span(&diff);
        if residual <= tol {
            let all = vec![true; n];
            let shift = closed_loop_limit(&ocp.model, &policy, &h, &all, max_iter, tol)?;
            let v_hat: Vec<f64> = h.iter().map(|x| x - shift).collect();
            let q_hat = ocp.q_table(&v_hat);
            let policy_hat = q_hat
                .iter()
                .map(|row| argmin(row).map(|(a, _)| a).unwrap_or(0))
                .collect();
            return Ok(InfiniteHorizonSolution {
                v_hat,
                q_hat,
                policy_hat,
                iterations: it,
                residual,
            });
        }
        let w = APERIODICITY_WEIGHT;
        for (hs, &ts) in h.iter_mut().zip(&th) {
            *hs = (1.0 - w) * *hs + w * ts;
        }
        let h0 = h[0];
        h.iter_mut().for_each(|x| *x -= h0);
    }
    Err(EquivalenceError::Mdp(MdpError::NonConvergence {
        iterations: max_iter,
        residual,
    }))
}

/// `V^_N^pi` by direct evaluation of policy `pi` in the modified OCP.
pub fn finite_horizon_policy_value(ocp: &ModifiedOcp, policy: &[usize], horizon: usize) -> Vec<f64> {
    let mut v = ocp.terminal_cost_hat.clone();
    for _ in 0..horizon {
        v = (0..ocp.n_states())
            .map(|s| {
                let a = policy[s];
                let l = ocp.stage_cost_hat[s][a];
                if l == f64::INFINITY {
                    l
                } else {
                    l + expectation(ocp.model.row(s, a), &v)
                }
            })
            .collect();
    }
    v
}

/// `Q*(s, pi(s)) + sum_{k=1}^{N-1} E_model[A*(s^_k, pi(s^_k))]`, the
/// telescoped form of `V^_N^pi`. Returns `V*` for `N = 0`.
pub fn telescoped_policy_value(
    real: &DpSolution,
    model: &ModelTransition,
    policy: &[usize],
    horizon: usize,
) -> Vec<f64> {
    if horizon == 0 {
        return real.v.clone();
    }
    let n = model.n_states();
    let adv: Vec<f64> = (0..n).map(|s| real.advantage[s][policy[s]]).collect();
    let mut total: Vec<f64> = (0..n).map(|s| real.q[s][policy[s]]).collect();
    let mut moment = adv;
    for _ in 1..horizon {
        moment = model.closed_loop_apply(policy, &moment);
        for (t, m) in total.iter_mut().zip(&moment) {
            *t += m;
        }
    }
    total
}

/// Gaps for one horizon, restricted to the set `S` and feasible pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonCheck {
    pub horizon: usize,
    pub value_gap: f64,
    pub q_gap: Option<f64>,
    pub policy_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfiniteHorizonCheck {
    pub value_gap: f64,
    pub q_gap: f64,
    pub policy_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_value_gap: f64,
    pub policy_agreement: f64,
    pub max_q_gap_on_feasible: f64,
    pub s_set: Vec<bool>,
    pub v_infinity: Option<f64>,
    pub horizons: Vec<HorizonCheck>,
    pub infinite_horizon: Option<InfiniteHorizonCheck>,
    /// States of `S` whose optimal action is not unique by `TIE_MARGIN`.
    pub ties_flagged: usize,
    /// `max |L^ - (l + (gamma - 1) E[V*])|` when the model is exact.
    pub exact_model_gap: Option<f64>,
    pub notes: Vec<String>,
}

/// Whether `chosen` is optimal for row `q` up to `TIE_MARGIN`.
fn agrees(q: &[f64], chosen: usize, reference: usize) -> bool {
    chosen == reference || (q[chosen] - q[reference]).abs() <= TIE_MARGIN
}

fn is_tied(q: &[f64]) -> bool {
    let mut finite: Vec<f64> = q.iter().copied().filter(|x| x.is_finite()).collect();
    finite.sort_by(f64::total_cmp);
    finite.len() >= 2 && finite[1] - finite[0] <= TIE_MARGIN
}

/// Solves the real system: value iteration for `gamma < 1`, relative value
/// iteration (bias values) for `gamma = 1`.
pub fn solve_real(real: &TabularMdp, tol: f64, max_iter: usize) -> Result<DpSolution, MdpError> {
    if real.gamma() < 1.0 {
        return mdp::value_iteration(real, tol, max_iter);
    }
    let avg = mdp::relative_value_iteration(real, tol, max_iter)?;
    if avg.gain.abs() > 10.0 * tol {
        return Err(MdpError::NonzeroGain(avg.gain));
    }
    Ok(DpSolution::from_values(real, avg.bias, avg.iterations))
}

/// End-to-end check of the finite- and infinite-horizon equivalences.
///
/// Solver failures are recorded in `notes`; the clauses that could not be
/// checked are left out of the report.
pub fn verify_theorems(
    real: &TabularMdp,
    model: &ModelTransition,
    horizons: &[usize],
    tol: f64,
) -> Result<EquivalenceReport, EquivalenceError> {
    if model.n_states() != real.n_states() || model.n_actions() != real.n_actions() {
        return Err(EquivalenceError::ShapeMismatch("model and MDP differ in shape".into()));
    }
    let max_iter = mdp::DEFAULT_MAX_ITER;
    let mut notes = Vec::new();
    if real.gamma() == 1.0 {
        notes.push("gamma = 1: V* are bias values of the gain-shifted MDP".to_string());
    }
    let sol = solve_real(real, tol, max_iter)?;
    let ocp = build_modified_costs(&sol, model)?;
    let n_bar = horizons.iter().copied().max().unwrap_or(0);
    let s_set = estimate_s_set(&ocp, &sol.policy, &sol.v, n_bar);
    if !s_set.iter().any(|&x| x) {
        notes.push("S is empty; no clause verified".to_string());
    }
    let n_in_s = s_set.iter().filter(|&&x| x).count().max(1);

    let exact_model_gap = (model.table() == real.transition()).then(|| {
        let mut gap: f64 = 0.0;
        for s in 0..real.n_states() {
            for a in 0..real.n_actions() {
                if !ocp.feasible_mask[s][a] {
                    continue;
                }
                let ev = expectation(&real.transition()[s][a], &sol.v);
                let formula = real.stage_cost()[s][a] + (real.gamma() - 1.0) * ev;
                gap = gap.max((ocp.stage_cost_hat[s][a] - formula).abs());
            }
        }
        gap
    });

    let ties_flagged = (0..real.n_states())
        .filter(|&s| s_set[s] && is_tied(&sol.q[s]))
        .count();
    if ties_flagged > 0 {
        notes.push(format!("{ties_flagged} state(s) with tied optimal actions"));
    }

    let q_gap_on = |q_hat: &[Vec<f64>], offset: f64| -> f64 {
        let mut gap: f64 = 0.0;
        for s in (0..real.n_states()).filter(|&s| s_set[s]) {
            for a in 0..real.n_actions() {
                if ocp.feasible_mask[s][a] {
                    gap = gap.max((q_hat[s][a] - (sol.q[s][a] - offset)).abs());
                }
            }
        }
        gap
    };
    let agreement_on = |policy: &[usize]| -> f64 {
        let agree = (0..real.n_states())
            .filter(|&s| s_set[s] && agrees(&sol.q[s], policy[s], sol.policy[s]))
            .count();
        agree as f64 / n_in_s as f64
    };

    let mut checks = Vec::new();
    for &n in horizons {
        match backward_induction(&ocp, n) {
            Ok(fh) => {
                let value_gap = (0..real.n_states())
                    .filter(|&s| s_set[s])
                    .map(|s| ext::ext_diff(fh.value()[s], sol.v[s]))
                    .fold(0.0, f64::max);
                checks.push(HorizonCheck {
                    horizon: n,
                    value_gap,
                    q_gap: fh.q_hat.as_deref().map(|q| q_gap_on(q, 0.0)),
                    policy_agreement: fh.policy_hat.as_deref().map(agreement_on),
                });
            }
            Err(e) => notes.push(format!("horizon {n}: {e}")),
        }
    }

    let mut v_infinity = None;
    let mut infinite_horizon = None;
    match estimate_v_infinity(&ocp, &sol.policy, &sol.v, max_iter, tol) {
        Ok(v_inf) => {
            v_infinity = Some(v_inf);
            match infinite_horizon_solution(&ocp, tol, max_iter) {
                Ok(ih) => {
                    let value_gap = (0..real.n_states())
                        .filter(|&s| s_set[s])
                        .map(|s| (ih.v_hat[s] - (sol.v[s] - v_inf)).abs())
                        .fold(0.0, f64::max);
                    infinite_horizon = Some(InfiniteHorizonCheck {
                        value_gap,
                        q_gap: q_gap_on(&ih.q_hat, v_inf),
                        policy_agreement: agreement_on(&ih.policy_hat),
                    });
                }
                Err(e) => notes.push(format!("infinite horizon: {e}")),
            }
        }
        Err(e) => notes.push(format!("v_inf not available, infinite horizon unchecked: {e}")),
    }
    let outside = s_set.iter().filter(|&&x| !x).count();
    if outside > 0 {
        notes.push(format!("{outside} state(s) outside S; their policies are unverified"));
    }

    let max_value_gap = checks.iter().map(|c| c.value_gap).fold(0.0, f64::max);
    let max_q_gap_on_feasible = checks.iter().filter_map(|c| c.q_gap).fold(0.0, f64::max);
    let policy_agreement = checks
        .iter()
        .filter_map(|c| c.policy_agreement)
        .fold(1.0, f64::min);
    Ok(EquivalenceReport {
        max_value_gap,
        policy_agreement,
        max_q_gap_on_feasible,
        s_set,
        v_infinity,
        horizons: checks,
        infinite_horizon,
        ties_flagged,
        exact_model_gap,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_solution(v: Vec<f64>, q: Vec<Vec<f64>>) -> DpSolution {
        let advantage = q
            .iter()
            .zip(&v)
            .map(|(row, &vs)| row.iter().map(|x| x - vs).collect())
            .collect();
        DpSolution {
            policy: vec![0; v.len()],
            v,
            q,
            advantage,
            bellman_residual: 0.0,
            gamma_used: 0.9,
            iterations: 0,
        }
    }

    #[test]
    fn infinite_value_marks_pairs_infeasible() {
        let model = ModelTransition::new(vec![
            vec![vec![0.5, 0.5], vec![1.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
        ])
        .unwrap();
        let sol = hand_solution(
            vec![1.0, f64::INFINITY],
            vec![vec![2.0, 1.0], vec![f64::INFINITY, f64::INFINITY]],
        );
        let ocp = build_modified_costs(&sol, &model).unwrap();
        assert_eq!(ocp.stage_cost_hat[0][0], f64::INFINITY);
        assert!(!ocp.feasible_mask[0][0]);
        assert!(ocp.feasible_mask[0][1]);
        assert_eq!(ocp.stage_cost_hat[0][1], 0.0);
        assert_eq!(ocp.terminal_cost_hat, sol.v);
        assert_eq!(
            backward_induction(&ocp, 1).unwrap_err(),
            EquivalenceError::AllActionsInfeasible(1)
        );
    }

    #[test]
    fn s_set_propagates_infinity() {
        // 0 -> 1 -> 2 (bad) deterministically.
        let model = ModelTransition::new(vec![
            vec![vec![0.0, 1.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0]],
            vec![vec![0.0, 0.0, 1.0]],
        ])
        .unwrap();
        let v = vec![0.0, 0.0, f64::INFINITY];
        let sol = hand_solution(v.clone(), vec![vec![0.0], vec![0.0], vec![f64::INFINITY]]);
        let ocp = build_modified_costs(&sol, &model).unwrap();
        assert_eq!(estimate_s_set(&ocp, &[0, 0, 0], &v, 0), vec![true, true, false]);
        assert_eq!(estimate_s_set(&ocp, &[0, 0, 0], &v, 1), vec![true, false, false]);
        assert_eq!(estimate_s_set(&ocp, &[0, 0, 0], &v, 2), vec![false, false, false]);
        let finite = vec![1.0, 2.0, 3.0];
        assert_eq!(estimate_s_set(&ocp, &[0, 0, 0], &finite, 5), vec![true; 3]);
    }

    #[test]
    fn v_infinity_fixed_point_and_periodic() {
        let to_last = ModelTransition::new(vec![
            vec![vec![0.0, 1.0, 0.0]],
            vec![vec![0.0, 0.0, 1.0]],
            vec![vec![0.0, 0.0, 1.0]],
        ])
        .unwrap();
        let v = vec![5.0, 3.0, 2.0];
        let sol = hand_solution(v.clone(), vec![vec![5.0], vec![3.0], vec![2.0]]);
        let ocp = build_modified_costs(&sol, &to_last).unwrap();
        let v_inf = estimate_v_infinity(&ocp, &[0, 0, 0], &v, 100, 1e-12).unwrap();
        assert_eq!(v_inf, 2.0);

        let flip = ModelTransition::new(vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]]).unwrap();
        let v = vec![1.0, 4.0];
        let sol = hand_solution(v.clone(), vec![vec![1.0], vec![4.0]]);
        let ocp = build_modified_costs(&sol, &flip).unwrap();
        assert!(matches!(
            estimate_v_infinity(&ocp, &[0, 0], &v, 1000, 1e-10),
            Err(EquivalenceError::NoConvergence { .. })
        ));
    }

    #[test]
    fn v_infinity_two_absorbing_classes_depends_on_start() {
        let model = ModelTransition::new(vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]).unwrap();
        let v = vec![1.0, 4.0];
        let sol = hand_solution(v.clone(), vec![vec![1.0], vec![4.0]]);
        let ocp = build_modified_costs(&sol, &model).unwrap();
        assert!(matches!(
            estimate_v_infinity(&ocp, &[0, 0], &v, 1000, 1e-10),
            Err(EquivalenceError::StartStateDependent { .. })
        ));
    }

    #[test]
    fn zero_horizon_returns_terminal_cost() {
        let model = ModelTransition::new(vec![vec![vec![1.0]]]).unwrap();
        let sol = hand_solution(vec![7.0], vec![vec![7.0]]);
        let ocp = build_modified_costs(&sol, &model).unwrap();
        let fh = backward_induction(&ocp, 0).unwrap();
        assert_eq!(fh.value(), &[7.0]);
        assert!(fh.q_hat.is_none() && fh.policy_hat.is_none());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = ModelTransition::new(vec![vec![vec![1.0]]]).unwrap();
        let sol = hand_solution(vec![1.0, 2.0], vec![vec![1.0], vec![2.0]]);
        assert!(matches!(
            build_modified_costs(&sol, &model),
            Err(EquivalenceError::ShapeMismatch(_))
        ));
    }
}
