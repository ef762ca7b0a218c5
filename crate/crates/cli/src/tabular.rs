use mdpmpc::equivalence::{
    build_modified_costs, finite_horizon_policy_value, solve_real, telescoped_policy_value, verify_theorems,
    EquivalenceReport, ModelTransition,
};
use mdpmpc::mdp::{relative_value_iteration, shift_stage_cost, DEFAULT_MAX_ITER};
use mdpmpc::random::{random_mdp, stream, transition_table};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{config_err, solver_err, Context, RunError};

pub(crate) const TOLERANCES: &[(&str, f64)] = &[
    ("value_gap", 1e-9),
    ("q_gap", 1e-9),
    ("policy_agreement", 1.0),
    ("tie_fraction", 0.02),
    ("exact_model_gap", 1e-12),
    ("telescoping_gap", 1e-9),
    ("infinite_horizon_gap", 1e-8),
    ("min_infinite_horizon_instances", 1.0),
    ("undiscounted_gap", 1e-8),
];

const DISCOUNTED_STREAM: u64 = 1;
const UNDISCOUNTED_STREAM: u64 = 2;
const POLICY_STREAM: u64 = 3;

/// Random (real MDP, wrong model) pairs checked against the finite- and
/// infinite-horizon equivalences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularParams {
    pub instances: usize,
    pub max_states: usize,
    pub max_actions: usize,
    /// Used in turn across discounted instances.
    pub gammas: Vec<f64>,
    pub horizons: Vec<usize>,
    /// Gain-shifted `gamma = 1` instances solved through bias values.
    pub undiscounted_instances: usize,
    /// Random policies per instance for the telescoping identity.
    pub policies_per_instance: usize,
    pub solver_tol: f64,
}

impl Default for TabularParams {
    fn default() -> Self {
        TabularParams {
            instances: 100,
            max_states: 20,
            max_actions: 5,
            gammas: vec![0.8, 0.95],
            horizons: vec![0, 1, 2, 5],
            undiscounted_instances: 10,
            policies_per_instance: 20,
            solver_tol: 1e-12,
        }
    }
}

impl TabularParams {
    pub(crate) fn validate(&self) -> Result<(), RunError> {
        if self.instances == 0 || self.max_states == 0 || self.max_actions == 0 {
            return Err(config_err("instances, max_states and max_actions must be positive"));
        }
        if self.gammas.is_empty() || self.gammas.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
            return Err(config_err("gammas must be a nonempty list in (0, 1)"));
        }
        if self.horizons.is_empty() {
            return Err(config_err("horizons is empty"));
        }
        if !(self.solver_tol > 0.0) {
            return Err(config_err("solver_tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
struct InstanceRow {
    instance: usize,
    kind: &'static str,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    value_gap: f64,
    q_gap: f64,
    policy_agreement: f64,
    ties_flagged: usize,
    states_in_s: usize,
    v_infinity: Option<f64>,
    infinite_value_gap: Option<f64>,
    infinite_q_gap: Option<f64>,
    exact_model_gap: Option<f64>,
    telescoping_gap: Option<f64>,
}

impl InstanceRow {
    fn new(instance: usize, kind: &'static str, gamma: f64, m: usize, rep: &EquivalenceReport) -> Self {
        let ih = rep.infinite_horizon.as_ref();
        InstanceRow {
            instance,
            kind,
            n_states: rep.s_set.len(),
            n_actions: m,
            gamma,
            value_gap: rep.max_value_gap,
            q_gap: rep.max_q_gap_on_feasible,
            policy_agreement: rep.policy_agreement,
            ties_flagged: rep.ties_flagged,
            states_in_s: rep.s_set.iter().filter(|&&x| x).count(),
            v_infinity: rep.v_infinity,
            infinite_value_gap: ih.map(|c| c.value_gap),
            infinite_q_gap: ih.map(|c| c.q_gap),
            exact_model_gap: None,
            telescoping_gap: None,
        }
    }

    fn tie_fraction(&self) -> f64 {
        self.ties_flagged as f64 / self.states_in_s.max(1) as f64
    }
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, f64::max)
}

pub(crate) fn run(ctx: &mut Context, p: &TabularParams) -> Result<Value, RunError> {
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for i in 0..p.instances {
        let mut r = stream(ctx.seed, DISCOUNTED_STREAM, i as u64);
        let n = r.random_range(1..=p.max_states);
        let m = r.random_range(1..=p.max_actions);
        let gamma = p.gammas[i % p.gammas.len()];
        let real = random_mdp(n, m, gamma, &mut r);
        let model = ModelTransition::new(transition_table(n, m, &mut r)).map_err(solver_err)?;
        let rep = verify_theorems(&real, &model, &p.horizons, p.solver_tol).map_err(solver_err)?;
        notes.extend(rep.notes.iter().map(|s| format!("instance {i}: {s}")));
        let mut row = InstanceRow::new(i, "discounted", gamma, m, &rep);

        let exact = verify_theorems(&real, &ModelTransition::of(&real), &p.horizons, p.solver_tol)
            .map_err(solver_err)?;
        row.exact_model_gap = exact.exact_model_gap;

        let sol = solve_real(&real, p.solver_tol, DEFAULT_MAX_ITER).map_err(solver_err)?;
        let ocp = build_modified_costs(&sol, &model).map_err(solver_err)?;
        let mut pr = stream(ctx.seed, POLICY_STREAM, i as u64);
        let mut tele: f64 = 0.0;
        for _ in 0..p.policies_per_instance {
            let pol: Vec<usize> = (0..n).map(|_| pr.random_range(0..m)).collect();
            for &h in &p.horizons {
                let direct = finite_horizon_policy_value(&ocp, &pol, h);
                let telescoped = telescoped_policy_value(&sol, &model, &pol, h);
                tele = max_of(direct.iter().zip(&telescoped).map(|(a, b)| (a - b).abs()).chain([tele]));
            }
        }
        row.telescoping_gap = (p.policies_per_instance > 0).then_some(tele);
        rows.push(row);
    }

    let mut undiscounted = Vec::new();
    for i in 0..p.undiscounted_instances {
        let mut r = stream(ctx.seed, UNDISCOUNTED_STREAM, i as u64);
        let n = r.random_range(1..=p.max_states);
        let m = r.random_range(1..=p.max_actions);
        let real = random_mdp(n, m, 1.0, &mut r);
        let model = ModelTransition::new(transition_table(n, m, &mut r)).map_err(solver_err)?;
        let avg = relative_value_iteration(&real, p.solver_tol, DEFAULT_MAX_ITER).map_err(solver_err)?;
        let shifted = shift_stage_cost(&real, avg.gain);
        let rep = verify_theorems(&shifted, &model, &p.horizons, p.solver_tol).map_err(solver_err)?;
        notes.extend(rep.notes.iter().map(|s| format!("undiscounted {i}: {s}")));
        undiscounted.push(InstanceRow::new(i, "undiscounted", 1.0, m, &rep));
    }

    let value_gap = max_of(rows.iter().map(|r| r.value_gap));
    let q_gap = max_of(rows.iter().map(|r| r.q_gap));
    let agreement = rows.iter().map(|r| r.policy_agreement).fold(1.0, f64::min);
    let ties = max_of(rows.iter().map(InstanceRow::tie_fraction));
    let exact_gap = max_of(rows.iter().filter_map(|r| r.exact_model_gap));
    let tele_gap = max_of(rows.iter().filter_map(|r| r.telescoping_gap));
    let ih: Vec<&InstanceRow> = rows.iter().filter(|r| r.infinite_value_gap.is_some()).collect();
    let ih_value = max_of(ih.iter().filter_map(|r| r.infinite_value_gap));
    let ih_q = max_of(ih.iter().filter_map(|r| r.infinite_q_gap));
    let und_value = max_of(undiscounted.iter().map(|r| r.value_gap));
    let und_q = max_of(undiscounted.iter().map(|r| r.q_gap));
    let und_agreement = undiscounted.iter().map(|r| r.policy_agreement).fold(1.0, f64::min);

    ctx.at_most("max_value_gap", value_gap, "value_gap");
    ctx.at_most("max_q_gap_on_feasible", q_gap, "q_gap");
    ctx.at_least("min_policy_agreement", agreement, "policy_agreement");
    ctx.at_most("max_tie_fraction", ties, "tie_fraction");
    ctx.at_most("exact_model_cost_gap", exact_gap, "exact_model_gap");
    if p.policies_per_instance > 0 {
        ctx.at_most("telescoping_gap", tele_gap, "telescoping_gap");
    }
    ctx.at_least("infinite_horizon_instances", ih.len() as f64, "min_infinite_horizon_instances");
    ctx.at_most("infinite_horizon_value_gap", ih_value, "infinite_horizon_gap");
    ctx.at_most("infinite_horizon_q_gap", ih_q, "infinite_horizon_gap");
    if p.undiscounted_instances > 0 {
        ctx.at_most("undiscounted_value_gap", und_value, "undiscounted_gap");
        ctx.at_most("undiscounted_q_gap", und_q, "undiscounted_gap");
        ctx.at_least("undiscounted_policy_agreement", und_agreement, "policy_agreement");
    }

    let all: Vec<InstanceRow> = rows.iter().chain(&undiscounted).cloned().collect();
    ctx.add_csv("tabular_instances.csv", &all)?;
    Ok(json!({
        "max_value_gap": value_gap,
        "max_q_gap_on_feasible": q_gap,
        "min_policy_agreement": agreement,
        "max_tie_fraction": ties,
        "exact_model_cost_gap": exact_gap,
        "telescoping_gap": tele_gap,
        "infinite_horizon_instances": ih.len(),
        "infinite_horizon_value_gap": ih_value,
        "infinite_horizon_q_gap": ih_q,
        "undiscounted_value_gap": und_value,
        "undiscounted_q_gap": und_q,
        "instances": all,
        "notes": notes,
    }))
}
