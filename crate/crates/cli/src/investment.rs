use mdpmpc::envs::investment::log_grid;
use mdpmpc::envs::{investment_closed_form, investment_mpc_value, InvestmentProblem};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{config_err, solver_err, Context, RunError};

pub(crate) const TOLERANCES: &[(&str, f64)] = &[("value_gap", 1e-4), ("policy_gap", 1e-4)];

/// A named copy of the base problem with some coefficients replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvestmentVariant {
    pub name: String,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub model_mu: Option<f64>,
    #[serde(default)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvestmentParams {
    pub problem: InvestmentProblem,
    pub horizon: usize,
    pub grid_low: f64,
    pub grid_high: f64,
    pub grid_points: usize,
    pub variants: Vec<InvestmentVariant>,
    pub solve_tol: f64,
}

impl Default for InvestmentParams {
    fn default() -> Self {
        let variant = |name: &str, gamma, model_mu| InvestmentVariant {
            name: name.into(),
            gamma,
            model_mu,
            horizon: None,
        };
        InvestmentParams {
            problem: InvestmentProblem {
                a_const: 5.0,
                alpha: 0.34,
                gamma: 0.9,
                model_mu: 0.8,
            },
            horizon: 10,
            grid_low: 0.2,
            grid_high: 10.0,
            grid_points: 200,
            variants: vec![variant("gamma_0.5", Some(0.5), None), variant("mu_1.2", None, Some(1.2))],
            solve_tol: 1e-10,
        }
    }
}

impl InvestmentParams {
    fn cases(&self) -> Vec<(String, InvestmentProblem, usize)> {
        let mut out = vec![("base".to_string(), self.problem, self.horizon)];
        for v in &self.variants {
            let p = InvestmentProblem {
                gamma: v.gamma.unwrap_or(self.problem.gamma),
                model_mu: v.model_mu.unwrap_or(self.problem.model_mu),
                ..self.problem
            };
            out.push((v.name.clone(), p, v.horizon.unwrap_or(self.horizon)));
        }
        out
    }

    pub(crate) fn validate(&self) -> Result<(), RunError> {
        if !(self.grid_low > 0.0 && self.grid_high >= self.grid_low) || self.grid_points == 0 {
            return Err(config_err("grid must be a nonempty positive interval"));
        }
        if !(self.solve_tol > 0.0) {
            return Err(config_err("solve_tol must be positive"));
        }
        let mut names = std::collections::BTreeSet::new();
        for (name, p, _) in self.cases() {
            let ok = !name.is_empty()
                && name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
            if !ok {
                return Err(config_err(format!("variant name '{name}' is not a plain file-name token")));
            }
            if !names.insert(name.clone()) {
                return Err(config_err(format!("duplicate variant '{name}'")));
            }
            p.validate().map_err(|e| config_err(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ValueRow {
    s: f64,
    v_star: f64,
    v_hat: f64,
}

#[derive(Serialize)]
struct PolicyRow {
    s: f64,
    pi_star: f64,
    pi_hat: f64,
}

pub(crate) fn run(ctx: &mut Context, p: &InvestmentParams) -> Result<Value, RunError> {
    let grid = log_grid(p.grid_low, p.grid_high, p.grid_points);
    let mut cases = Vec::new();
    for (name, problem, horizon) in p.cases() {
        let mut values = Vec::with_capacity(grid.len());
        let mut policies = Vec::with_capacity(grid.len());
        let mut residual: f64 = 0.0;
        for &s in &grid {
            let (v_star, pi_star) = investment_closed_form(&problem, s).map_err(solver_err)?;
            let mpc = investment_mpc_value(&problem, horizon, s, p.solve_tol)
                .map_err(|e| solver_err(format!("{name}, s = {s}: {e}")))?;
            residual = residual.max(mpc.residual);
            values.push(ValueRow {
                s,
                v_star,
                v_hat: mpc.value,
            });
            policies.push(PolicyRow {
                s,
                pi_star,
                pi_hat: mpc.first_input,
            });
        }
        let value_gap = values.iter().map(|r| (r.v_hat - r.v_star).abs()).fold(0.0, f64::max);
        // With no inputs to choose there is no policy to compare.
        let policy_gap = if horizon == 0 {
            None
        } else {
            Some(policies.iter().map(|r| (r.pi_hat - r.pi_star).abs()).fold(0.0, f64::max))
        };
        ctx.at_most(format!("value_gap[{name}]"), value_gap, "value_gap");
        if let Some(g) = policy_gap {
            ctx.at_most(format!("policy_gap[{name}]"), g, "policy_gap");
        }
        ctx.add_csv(format!("investment_{name}_value.csv"), &values)?;
        ctx.add_csv(format!("investment_{name}_policy.csv"), &policies)?;
        cases.push(json!({
            "name": name,
            "problem": problem,
            "horizon": horizon,
            "c_coef": problem.c_coef(),
            "value_gap": value_gap,
            "policy_gap": policy_gap,
            "max_residual": residual,
        }));
    }
    Ok(json!({ "cases": cases }))
}
