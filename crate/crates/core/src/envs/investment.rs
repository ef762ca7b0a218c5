//! Optimal investment: `s+ = a`, `l(s, a) = -ln(A s^alpha - a)`, with the
//! closed-form discounted solution `V*(s) = B + C ln s`,
//! `pi*(s) = gamma alpha A s^alpha`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::optim::{self, Bounds};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvestmentProblem {
    pub a_const: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Gain of the wrong model `s+ = mu a`.
    pub model_mu: f64,
}

impl InvestmentProblem {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.a_const > 0.0
            && self.alpha > 0.0
            && self.alpha < 1.0
            && self.gamma > 0.0
            && self.gamma < 1.0
            && self.model_mu > 0.0
            && self.model_mu.is_finite()
            && self.a_const.is_finite();
        if ok {
            Ok(())
        } else {
            Err(format!("invalid investment problem {self:?}"))
        }
    }

    pub fn c_coef(&self) -> f64 {
        self.alpha / (self.alpha * self.gamma - 1.0)
    }

    pub fn b_coef(&self) -> f64 {
        let ag = self.alpha * self.gamma;
        ((1.0 - ag) * self.a_const).ln() + ag / (1.0 - ag) * (ag * self.a_const).ln()
    }

    fn b_value(&self) -> f64 {
        self.b_coef() / (self.gamma - 1.0)
    }

    fn v_star(&self, s: f64) -> f64 {
        self.b_value() + self.c_coef() * s.ln()
    }
}

/// `(V*(s), pi*(s))`.
pub fn investment_closed_form(p: &InvestmentProblem, s: f64) -> Result<(f64, f64), EnvError> {
    p.validate().map_err(|_| EnvError::Domain(vec![s]))?;
    if !(s > 0.0 && s.is_finite()) {
        return Err(EnvError::Domain(vec![s]));
    }
    let pi = p.gamma * p.alpha * p.a_const * s.powf(p.alpha);
    Ok((p.v_star(s), pi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvestmentMpc {
    pub value: f64,
    pub first_input: f64,
    pub inputs: Vec<f64>,
    pub states: Vec<f64>,
    pub residual: f64,
}

/// Cost-modified OCP on the wrong model, with terminal cost `V*` and stage
/// cost `l(s, a) + gamma V*(a) - V*(mu a)`. Inputs are written as
/// `a_k = exp(u_k) A s_k^alpha` with `u_k < 0`, which keeps every stage inside
/// its domain; in these coordinates the objective is convex with a diagonal
/// Hessian.
pub fn investment_mpc_value(
    p: &InvestmentProblem,
    horizon: usize,
    s: f64,
    tol: f64,
) -> Result<InvestmentMpc, EnvError> {
    p.validate().map_err(|_| EnvError::Domain(vec![s]))?;
    if !(s > 0.0 && s.is_finite()) {
        return Err(EnvError::Domain(vec![s]));
    }
    if horizon == 0 {
        return Ok(InvestmentMpc {
            value: p.v_star(s),
            first_input: f64::NAN,
            inputs: Vec::new(),
            states: vec![s],
            residual: 0.0,
        });
    }
    let (c, b, g) = (p.c_coef(), p.b_value(), p.gamma);
    let (ln_a, ln_mu, alpha) = (p.a_const.ln(), p.model_mu.ln(), p.alpha);
    // Log-inputs p_k = ln a_k along the model trajectory.
    let log_inputs = |u: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(horizon);
        let mut ln_s = s.ln();
        for &uk in u {
            let pk = uk + ln_a + alpha * ln_s;
            out.push(pk);
            ln_s = ln_mu + pk;
        }
        out
    };
    let objective = |u: &[f64], grad: &mut [f64]| -> f64 {
        let logs = log_inputs(u);
        let mut f = b + c * (ln_mu + logs[horizon - 1]);
        for k in 0..horizon {
            // ln(A s^alpha - a) = ln(A s^alpha) + ln(1 - t).
            f += -(logs[k] - u[k]) - (-u[k].exp_m1()).ln() + g * (b + c * logs[k])
                - (b + c * (ln_mu + logs[k]));
        }
        let mut lam = 0.0;
        for k in (0..horizon).rev() {
            let local = -1.0 + (g - 1.0) * c + if k == horizon - 1 { c } else { 0.0 };
            lam = local + alpha * lam;
            let t = u[k].exp();
            grad[k] = lam + 1.0 + t / (1.0 - t);
        }
        f
    };
    let hessian = |u: &[f64]| {
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            horizon,
            u.iter().map(|&uk| {
                let t = uk.exp();
                t / ((1.0 - t) * (1.0 - t))
            }),
        ))
    };
    let bounds = Bounds::new(vec![-40.0; horizon], vec![-1e-12; horizon]).expect("ordered bounds");
    let opts = optim::Options { max_iter: 200, tol };
    let mut best: Option<optim::Minimum> = None;
    for t0 in [0.05f64, 0.5, 0.9] {
        let m = optim::minimize_newton(objective, hessian, &vec![t0.ln(); horizon], &bounds, &opts);
        if m.f.is_finite() && best.as_ref().is_none_or(|b| m.f < b.f) {
            best = Some(m);
        }
    }
    let m = best.ok_or(EnvError::NonConvergence {
        iterations: 0,
        residual: f64::INFINITY,
    })?;
    if m.residual > tol.max(1e-9) {
        return Err(EnvError::NonConvergence {
            iterations: m.iterations,
            residual: m.residual,
        });
    }
    let inputs: Vec<f64> = log_inputs(&m.x).iter().map(|v| v.exp()).collect();
    let mut states = vec![s];
    for &a in &inputs {
        states.push(p.model_mu * a);
    }
    // Report the objective in the original coordinates.
    let mut value = p.v_star(states[horizon]);
    for k in 0..horizon {
        let (sk, ak) = (states[k], inputs[k]);
        value += -(p.a_const * sk.powf(alpha) - ak).ln() + g * p.v_star(ak) - p.v_star(p.model_mu * ak);
    }
    Ok(InvestmentMpc {
        value,
        first_input: inputs[0],
        inputs,
        states,
        residual: m.residual,
    })
}

/// `count` log-spaced points on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}
