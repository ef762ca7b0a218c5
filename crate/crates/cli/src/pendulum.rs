use mdpmpc::envs::pendulum::pendulum_theta;
use mdpmpc::envs::{pendulum_dp, pendulum_scheme, GridDpBaseline, GridSpec, PendulumEnv};
use mdpmpc::mpc::{solve_value, MpcError, MpcScheme, SolveOptions, ThetaVector};
use mdpmpc::tuning::{run_learning, Algorithm, LearningConfig};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{config_err, solver_err, Context, RunError};

pub(crate) const DP_TOLERANCES: &[(&str, f64)] = &[
    ("bellman_residual", 1e-6),
    ("self_convergence", 0.05),
    ("restoring_input", 0.0),
];

pub(crate) const LEARN_TOLERANCES: &[(&str, f64)] = &[("bellman_residual", 1e-6)];

/// Floor on `|V|` when relative changes are taken, so the cost-free origin
/// is compared in absolute terms.
const RELATIVE_FLOOR: f64 = 1e-3;

/// `count x count` tensor grid on `[low, high]^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeGrid {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

impl Default for ProbeGrid {
    fn default() -> Self {
        ProbeGrid {
            low: -0.4,
            high: 0.4,
            count: 5,
        }
    }
}

impl ProbeGrid {
    fn states(&self) -> Vec<[f64; 2]> {
        let axis: Vec<f64> = if self.count == 1 {
            vec![0.5 * (self.low + self.high)]
        } else {
            let h = (self.high - self.low) / (self.count - 1) as f64;
            (0..self.count).map(|i| self.low + h * i as f64).collect()
        };
        axis.iter().flat_map(|&x| axis.iter().map(move |&y| [x, y])).collect()
    }

    fn validate(&self, env: &PendulumEnv) -> Result<(), RunError> {
        let inside = |x: f64| x.abs() <= env.state_bound;
        if self.count == 0 || !(self.low <= self.high) || !inside(self.low) || !inside(self.high) {
            return Err(config_err("probe grid must be nonempty and inside the state box"));
        }
        Ok(())
    }
}

fn check_spec(spec: &GridSpec) -> Result<(), RunError> {
    if spec.nodes_per_dim < 2 || spec.actions < 2 || spec.quadrature_order == 0 {
        return Err(config_err("grid needs at least 2 nodes, 2 actions and one quadrature point"));
    }
    if !(spec.tol > 0.0) {
        return Err(config_err("grid tol must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpParams {
    pub env: PendulumEnv,
    pub grid: GridSpec,
    /// Nodes per dimension of the refined grid for the self-convergence study.
    pub refined_nodes: usize,
    pub probes: ProbeGrid,
    /// State at which the policy must push back toward the origin.
    pub restoring_state: [f64; 2],
}

impl Default for DpParams {
    fn default() -> Self {
        DpParams {
            env: PendulumEnv::default(),
            grid: GridSpec::default(),
            refined_nodes: 81,
            probes: ProbeGrid::default(),
            restoring_state: [0.5, 0.0],
        }
    }
}

impl DpParams {
    pub(crate) fn validate(&self) -> Result<(), RunError> {
        check_spec(&self.grid)?;
        if self.refined_nodes <= self.grid.nodes_per_dim {
            return Err(config_err("refined_nodes must exceed grid.nodes_per_dim"));
        }
        self.probes.validate(&self.env)?;
        if self.restoring_state[0] <= 0.0 || self.restoring_state[0] > self.env.state_bound {
            return Err(config_err("restoring_state needs a positive angle inside the box"));
        }
        Ok(())
    }
}

fn solve_dp(env: &PendulumEnv, spec: &GridSpec) -> Result<GridDpBaseline, RunError> {
    pendulum_dp(env, spec).map_err(|e| solver_err(format!("grid DP ({} nodes): {e}", spec.nodes_per_dim)))
}

#[derive(Serialize)]
struct ProbeRow {
    s1: f64,
    s2: f64,
    v_coarse: f64,
    v_refined: f64,
    relative_change: f64,
}

fn dp_csv(dp: &GridDpBaseline) -> Result<Vec<u8>, RunError> {
    let mut out = Vec::new();
    dp.write_csv(&mut out).map_err(|e| solver_err(format!("csv: {e}")))?;
    Ok(out)
}

pub(crate) fn run_dp(ctx: &mut Context, p: &DpParams) -> Result<Value, RunError> {
    let coarse = solve_dp(&p.env, &p.grid)?;
    let fine_spec = GridSpec {
        nodes_per_dim: p.refined_nodes,
        ..p.grid.clone()
    };
    let fine = solve_dp(&p.env, &fine_spec)?;
    let rows: Vec<ProbeRow> = p
        .probes
        .states()
        .into_iter()
        .map(|[s1, s2]| {
            let (c, f) = (coarse.value_at(&[s1, s2]), fine.value_at(&[s1, s2]));
            ProbeRow {
                s1,
                s2,
                v_coarse: c,
                v_refined: f,
                relative_change: (c - f).abs() / f.abs().max(RELATIVE_FLOOR),
            }
        })
        .collect();
    let worst = rows.iter().map(|r| r.relative_change).fold(0.0, f64::max);
    let restoring = coarse.policy_at(&p.restoring_state);

    ctx.at_most("bellman_residual", coarse.residual, "bellman_residual");
    ctx.at_most("bellman_residual_refined", fine.residual, "bellman_residual");
    ctx.at_most("self_convergence", worst, "self_convergence");
    let limit = ctx.tolerance("restoring_input");
    ctx.below("restoring_input", restoring, limit);

    ctx.add_file("pendulum_dp.csv", dp_csv(&coarse)?);
    ctx.add_csv("pendulum_dp_probes.csv", &rows)?;
    Ok(json!({
        "nodes_per_dim": p.grid.nodes_per_dim,
        "refined_nodes": p.refined_nodes,
        "bellman_residual": coarse.residual,
        "bellman_residual_refined": fine.residual,
        "iterations": coarse.iterations,
        "iterations_refined": fine.iterations,
        "value_at_origin": coarse.value_at(&[0.0, 0.0]),
        "min_grid_value": coarse.v_grid.iter().copied().fold(f64::INFINITY, f64::min),
        "self_convergence": worst,
        "restoring_input": restoring,
        "probes": rows,
    }))
}

fn default_runs() -> Vec<LearningConfig> {
    let eval_states = vec![
        vec![0.3, 0.0],
        vec![-0.3, 0.2],
        vec![0.1, -0.4],
        vec![-0.2, -0.2],
        vec![0.4, 0.1],
    ];
    let solve = SolveOptions {
        random_starts: 0,
        ..SolveOptions::default()
    };
    let q = LearningConfig {
        algorithm: Algorithm::QLearning,
        learning_rate: 0.01,
        discount: 0.95,
        episodes: 25,
        steps_per_episode: 20,
        exploration_std: 0.1,
        seed: 0,
        eval_states,
        start_states: Vec::new(),
        gradient_step: 1e-5,
        perturbation: 0.05,
        rollout_steps: 40,
        rollout_seeds: 1,
        max_update_norm: None,
        snapshot_every: None,
        track_closed_loop: true,
        solve,
    };
    let ps = LearningConfig {
        algorithm: Algorithm::PolicySearch,
        learning_rate: 1e-3,
        perturbation: 0.01,
        max_update_norm: Some(0.01),
        track_closed_loop: false,
        ..q.clone()
    };
    vec![q, ps]
}

/// Learning runs from the same initial MPC parameterisation, compared with
/// the grid DP baseline before and after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnParams {
    pub env: PendulumEnv,
    pub grid: GridSpec,
    pub horizon: usize,
    /// Initial linearisation coefficient of the MPC model.
    pub theta_l: f64,
    pub probes: ProbeGrid,
    /// Steps in each end window of the closed-loop cost trend.
    pub window: usize,
    /// Each run's seed is replaced by the experiment seed.
    pub runs: Vec<LearningConfig>,
}

impl Default for LearnParams {
    fn default() -> Self {
        LearnParams {
            env: PendulumEnv::default(),
            grid: GridSpec::default(),
            horizon: 10,
            theta_l: 0.25,
            probes: ProbeGrid::default(),
            window: 50,
            runs: default_runs(),
        }
    }
}

fn label(a: Algorithm) -> &'static str {
    match a {
        Algorithm::QLearning => "q_learning",
        Algorithm::PolicySearch => "policy_search",
    }
}

impl LearnParams {
    pub(crate) fn validate(&self) -> Result<(), RunError> {
        check_spec(&self.grid)?;
        self.probes.validate(&self.env)?;
        if self.horizon == 0 {
            return Err(config_err("horizon must be positive"));
        }
        if self.runs.is_empty() || self.window == 0 {
            return Err(config_err("need at least one run and a positive window"));
        }
        let mut seen = Vec::new();
        for r in &self.runs {
            let name = label(r.algorithm);
            if seen.contains(&name) {
                return Err(config_err(format!("two runs use {name}")));
            }
            seen.push(name);
            r.validate().map_err(|e| config_err(format!("{name}: {e}")))?;
            if r.episodes * r.steps_per_episode < 2 * self.window {
                return Err(config_err(format!("{name}: fewer steps than two windows")));
            }
            if r.algorithm == Algorithm::QLearning && !r.track_closed_loop {
                return Err(config_err("q_learning needs track_closed_loop for the cost trend"));
            }
            if r.eval_states.iter().chain(&r.start_states).any(|s| s.len() != 2) {
                return Err(config_err(format!("{name}: states must have two entries")));
            }
        }
        Ok(())
    }
}

struct Gaps {
    value: f64,
    policy: f64,
    incumbents: usize,
    values: Vec<f64>,
    inputs: Vec<f64>,
}

/// Largest value and policy gaps to the baseline over the probe states.
fn gaps(
    scheme: &MpcScheme,
    theta: &ThetaVector,
    dp: &GridDpBaseline,
    probes: &[[f64; 2]],
    opts: &SolveOptions,
) -> Result<Gaps, RunError> {
    let mut g = Gaps {
        value: 0.0,
        policy: 0.0,
        incumbents: 0,
        values: Vec::new(),
        inputs: Vec::new(),
    };
    for s in probes {
        let sol = match solve_value(scheme, theta, s, opts) {
            Ok(sol) => sol,
            Err(MpcError::MaxIterReached(sol)) => {
                g.incumbents += 1;
                *sol
            }
            Err(e) => return Err(solver_err(format!("MPC at {s:?}: {e}"))),
        };
        g.value = g.value.max((sol.objective - dp.value_at(s)).abs());
        g.policy = g.policy.max((sol.first_input[0] - dp.policy_at(s)).abs());
        g.values.push(sol.objective);
        g.inputs.push(sol.first_input[0]);
    }
    Ok(g)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Serialize)]
struct LearnProbeRow {
    s1: f64,
    s2: f64,
    v_dp: f64,
    pi_dp: f64,
    v_initial: f64,
    pi_initial: f64,
    v_final: f64,
    pi_final: f64,
}

pub(crate) fn run_learn(ctx: &mut Context, p: &LearnParams) -> Result<Value, RunError> {
    let dp = solve_dp(&p.env, &p.grid)?;
    ctx.at_most("bellman_residual", dp.residual, "bellman_residual");
    ctx.add_file("pendulum_dp.csv", dp_csv(&dp)?);
    let scheme = pendulum_scheme(&p.env, p.horizon);
    let theta0 = pendulum_theta(p.theta_l, &DMatrix::identity(2, 2), &DMatrix::identity(3, 3)).map_err(solver_err)?;
    let probes = p.probes.states();

    let mut runs = Vec::new();
    for run in &p.runs {
        let name = label(run.algorithm);
        let cfg = LearningConfig {
            seed: ctx.seed,
            ..run.clone()
        };
        let trace = run_learning(&p.env, &scheme, &theta0, &cfg).map_err(|e| solver_err(format!("{name}: {e}")))?;
        let before = gaps(&scheme, &theta0, &dp, &probes, &cfg.solve)?;
        let after = gaps(&scheme, &trace.final_theta, &dp, &probes, &cfg.solve)?;
        let costs: Vec<f64> = match run.algorithm {
            Algorithm::QLearning => trace.records.iter().filter_map(|r| r.closed_loop).collect(),
            Algorithm::PolicySearch => trace.records.iter().map(|r| r.j_or_td).collect(),
        };
        if costs.len() < 2 * p.window {
            return Err(solver_err(format!("{name}: only {} closed-loop estimates", costs.len())));
        }
        let first = mean(&costs[..p.window]);
        let last = mean(&costs[costs.len() - p.window..]);
        ctx.below(format!("value_gap[{name}]"), after.value, before.value);
        ctx.below(format!("policy_gap[{name}]"), after.policy, before.policy);
        ctx.below(format!("closed_loop_cost[{name}]"), last, first);

        let mut trace_csv = Vec::new();
        trace.write_csv(&mut trace_csv).map_err(|e| solver_err(format!("csv: {e}")))?;
        ctx.add_file(format!("learn_{name}.csv"), trace_csv);
        let rows: Vec<LearnProbeRow> = probes
            .iter()
            .enumerate()
            .map(|(i, s)| LearnProbeRow {
                s1: s[0],
                s2: s[1],
                v_dp: dp.value_at(s),
                pi_dp: dp.policy_at(s),
                v_initial: before.values[i],
                pi_initial: before.inputs[i],
                v_final: after.values[i],
                pi_final: after.inputs[i],
            })
            .collect();
        ctx.add_csv(format!("learn_{name}_probes.csv"), &rows)?;
        runs.push(json!({
            "algorithm": name,
            "steps": trace.records.len(),
            "skipped_steps": trace.records.iter().filter(|r| r.skipped).count(),
            "aborted_episodes": trace.aborted_episodes,
            "value_gap_initial": before.value,
            "value_gap_final": after.value,
            "policy_gap_initial": before.policy,
            "policy_gap_final": after.policy,
            "closed_loop_first_window": first,
            "closed_loop_last_window": last,
            "incumbent_solves": before.incumbents + after.incumbents,
            "final_theta": trace.final_theta,
        }));
    }
    Ok(json!({
        "bellman_residual": dp.residual,
        "runs": runs,
    }))
}
