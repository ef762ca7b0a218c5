use mdpmpc::lqr::{solve_discounted_riccati, spectral_radius, verify_lqr_equivalence, LqrProblem, DEFAULT_MAX_ITER};
use mdpmpc::random::{stream, InstanceRng};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{config_err, solver_err, Context, RunError};

pub(crate) const TOLERANCES: &[(&str, f64)] = &[
    ("scalar_root", 1e-10),
    ("s_gap", 1e-8),
    ("k_gap", 1e-8),
    ("offset_gap", 1e-8),
    ("min_matched_fraction", 0.75),
];

const INSTANCE_STREAM: u64 = 11;

/// Scalar problem with cost `t s^2 + r a^2` and no cross term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalarCase {
    pub a: f64,
    pub b: f64,
    pub t: f64,
    pub r: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub model_a: f64,
    pub model_b: f64,
}

impl Default for ScalarCase {
    fn default() -> Self {
        ScalarCase {
            a: 1.0,
            b: 1.0,
            t: 1.0,
            r: 1.0,
            gamma: 0.9,
            sigma: 0.0,
            model_a: 0.8,
            model_b: 1.2,
        }
    }
}

impl ScalarCase {
    /// Positive root of `gamma b^2 S^2 + (r - gamma t b^2 - gamma a^2 r) S - t r = 0`
    /// and the matching gain.
    fn closed_form(&self) -> (f64, f64) {
        let (a, b, t, r, g) = (self.a, self.b, self.t, self.r, self.gamma);
        let qa = g * b * b;
        let qb = r - g * t * b * b - g * a * a * r;
        let qc = -t * r;
        let s = if qa == 0.0 { -qc / qb } else { (-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa) };
        (s, g * a * b * s / (r + g * b * b * s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqrParams {
    pub scalar: ScalarCase,
    /// Random problems with a perturbed model.
    pub instances: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub gamma: f64,
    /// Largest relative model perturbation; each instance draws its own
    /// size uniformly below it.
    pub perturbation: f64,
    /// Process noise covariance `noise_scale * I`.
    pub noise_scale: f64,
    pub tol: f64,
}

impl Default for LqrParams {
    fn default() -> Self {
        LqrParams {
            scalar: ScalarCase::default(),
            instances: 40,
            state_dim: 2,
            input_dim: 1,
            gamma: 0.9,
            perturbation: 0.2,
            noise_scale: 0.01,
            tol: 1e-8,
        }
    }
}

impl LqrParams {
    pub(crate) fn validate(&self) -> Result<(), RunError> {
        if self.state_dim == 0 || self.input_dim == 0 {
            return Err(config_err("state_dim and input_dim must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) || !(self.scalar.gamma > 0.0 && self.scalar.gamma < 1.0) {
            return Err(config_err("gamma must lie in (0, 1)"));
        }
        if !(self.perturbation >= 0.0 && self.noise_scale >= 0.0 && self.scalar.sigma >= 0.0) {
            return Err(config_err("perturbation and noise must be nonnegative"));
        }
        if !(self.scalar.t > 0.0 && self.scalar.r > 0.0) {
            return Err(config_err("scalar cost weights must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(config_err("tol must be positive"));
        }
        Ok(())
    }
}

fn uniform(r: usize, c: usize, half_width: f64, g: &mut InstanceRng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| g.random_range(-half_width..half_width))
}

fn random_problem(p: &LqrParams, g: &mut InstanceRng) -> Result<LqrProblem, RunError> {
    let (n, m) = (p.state_dim, p.input_dim);
    let a = uniform(n, n, 1.0, g);
    let b = uniform(n, m, 1.0, g);
    let f = uniform(n + m, n + m, 1.0, g);
    let cost = &f * f.transpose() + DMatrix::identity(n + m, n + m) * 0.1;
    let cost = (&cost + cost.transpose()) * 0.5;
    LqrProblem::new(a, b, cost, DMatrix::identity(n, n) * p.noise_scale, p.gamma).map_err(solver_err)
}

fn perturb(m: &DMatrix<f64>, delta: f64, g: &mut InstanceRng) -> DMatrix<f64> {
    let scale = m.amax().max(1.0);
    m.map(|x| x + delta * scale * g.random_range(-1.0..1.0))
}

#[derive(Debug, Clone, Serialize)]
struct InstanceRow {
    instance: usize,
    perturbation: f64,
    status: &'static str,
    gap_s: Option<f64>,
    gap_k: Option<f64>,
    offset_gap: Option<f64>,
    v_infinity: f64,
    model_radius: f64,
}

pub(crate) fn run(ctx: &mut Context, p: &LqrParams) -> Result<Value, RunError> {
    let sc = &p.scalar;
    let problem = LqrProblem::new(
        DMatrix::from_element(1, 1, sc.a),
        DMatrix::from_element(1, 1, sc.b),
        DMatrix::from_row_slice(2, 2, &[sc.t, 0.0, 0.0, sc.r]),
        DMatrix::from_element(1, 1, sc.sigma),
        sc.gamma,
    )
    .map_err(config_err)?;
    let sol = solve_discounted_riccati(&problem, 1e-15, DEFAULT_MAX_ITER).map_err(solver_err)?;
    let (s_root, k_root) = sc.closed_form();
    let (s, k) = (sol.s_mat[(0, 0)], sol.k_gain[(0, 0)]);
    let scalar_rep = verify_lqr_equivalence(
        &problem,
        &DMatrix::from_element(1, 1, sc.model_a),
        &DMatrix::from_element(1, 1, sc.model_b),
        p.tol,
    )
    .map_err(solver_err)?;
    ctx.at_most("scalar_s_root_gap", (s - s_root).abs(), "scalar_root");
    ctx.at_most("scalar_k_root_gap", (k - k_root).abs(), "scalar_root");
    ctx.at_most("scalar_model_s_gap", scalar_rep.gap_s, "s_gap");
    ctx.at_most("scalar_model_k_gap", scalar_rep.gap_k, "k_gap");

    let mut rows = Vec::new();
    for i in 0..p.instances {
        let mut g = stream(ctx.seed, INSTANCE_STREAM, i as u64);
        let problem = random_problem(p, &mut g)?;
        let delta = p.perturbation * g.random_range(0.0..=1.0);
        let a_hat = perturb(&problem.a_mat, delta, &mut g);
        let b_hat = perturb(&problem.b_mat, delta, &mut g);
        let sol = solve_discounted_riccati(&problem, 1e-15, DEFAULT_MAX_ITER).map_err(solver_err)?;
        let model_radius = spectral_radius(&(&a_hat - &b_hat * &sol.k_gain));
        let v_trace = p.gamma / (1.0 - p.gamma) * (&sol.s_mat * &problem.sigma).trace();
        let mut row = InstanceRow {
            instance: i,
            perturbation: delta,
            status: "unstable_model",
            gap_s: None,
            gap_k: None,
            offset_gap: None,
            v_infinity: v_trace,
            model_radius,
        };
        // Only a model that the optimal gain stabilises can reproduce it.
        if model_radius < 1.0 {
            match verify_lqr_equivalence(&problem, &a_hat, &b_hat, p.tol) {
                Ok(r) => {
                    row.status = "matched";
                    row.gap_s = Some(r.gap_s);
                    row.gap_k = Some(r.gap_k);
                    // The offset is measured against the trace formula.
                    row.offset_gap = Some(r.offset_gap.max((r.v_infinity - v_trace).abs()));
                }
                Err(e) => {
                    log::warn!("instance {i}: {e}");
                    row.status = "solver_failed";
                }
            }
        }
        rows.push(row);
    }
    let stable: Vec<&InstanceRow> = rows.iter().filter(|r| r.status != "unstable_model").collect();
    let matched = rows.iter().filter(|r| r.status == "matched").count();
    let gap = |f: fn(&InstanceRow) -> Option<f64>| {
        stable.iter().map(|r| f(r).unwrap_or(f64::INFINITY)).fold(0.0, f64::max)
    };
    let (gap_s, gap_k, offset) = (gap(|r| r.gap_s), gap(|r| r.gap_k), gap(|r| r.offset_gap));
    let fraction = if p.instances == 0 { 1.0 } else { matched as f64 / p.instances as f64 };
    if p.instances > 0 {
        ctx.at_most("max_s_gap", gap_s, "s_gap");
        ctx.at_most("max_k_gap", gap_k, "k_gap");
        ctx.at_most("max_offset_gap", offset, "offset_gap");
        ctx.at_least("matched_fraction", fraction, "min_matched_fraction");
    }
    ctx.add_csv("lqr_instances.csv", &rows)?;
    Ok(json!({
        "scalar": {
            "s": s,
            "k": k,
            "s_closed_form": s_root,
            "k_closed_form": k_root,
            "v_infinity": sol.v_infinity,
            "model": scalar_rep,
        },
        "max_s_gap": gap_s,
        "max_k_gap": gap_k,
        "max_offset_gap": offset,
        "matched": matched,
        "unstable_models": rows.len() - stable.len(),
        "instances": rows,
    }))
}
