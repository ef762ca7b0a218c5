//! Tuning theta against a real environment: TD(0) semi-gradient
//! Q-learning on the MPC action-value function, and SPSA policy search on
//! the empirical closed-loop cost.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{rollout, EnvError, Environment, RolloutError};
use crate::mpc::{
    policy, solve_value, theta_gradient, GradientTarget, MpcError, MpcScheme, SolveOptions, ThetaVector,
};
use crate::random::{stream, InstanceRng};

const EPISODE_STREAM: u64 = 0x4550_0000;
const ROLLOUT_STREAM: u64 = 0x524f_0000;
const SPSA_STREAM: u64 = 0x5350_0000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TuningError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    QLearning,
    PolicySearch,
}

fn default_gradient_step() -> f64 {
    1e-5
}

fn default_perturbation() -> f64 {
    0.05
}

fn default_rollout_steps() -> usize {
    30
}

fn default_rollout_seeds() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    /// Discount of the real MDP.
    pub discount: f64,
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// Std of the Gaussian perturbation of the MPC action (then clipped).
    pub exploration_std: f64,
    pub seed: u64,
    /// States over which the closed-loop cost `J` is averaged.
    pub eval_states: Vec<Vec<f64>>,
    /// Episode start states, used in turn; `eval_states` when empty.
    #[serde(default)]
    pub start_states: Vec<Vec<f64>>,
    /// Relative finite-difference step of the theta gradient.
    #[serde(default = "default_gradient_step")]
    pub gradient_step: f64,
    /// SPSA perturbation size.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    /// Length of each rollout in the estimate of `J`.
    #[serde(default = "default_rollout_steps")]
    pub rollout_steps: usize,
    /// Disturbance seeds per evaluation state in the estimate of `J`.
    #[serde(default = "default_rollout_seeds")]
    pub rollout_seeds: usize,
    /// Largest Euclidean norm of a single theta update; unbounded if unset.
    #[serde(default)]
    pub max_update_norm: Option<f64>,
    /// Keep a theta snapshot every this many steps (and at the end).
    #[serde(default)]
    pub snapshot_every: Option<usize>,
    /// Estimate `J` at every Q-learning step as well (policy search always
    /// does).
    #[serde(default)]
    pub track_closed_loop: bool,
    #[serde(default)]
    pub solve: SolveOptions,
}

impl LearningConfig {
    pub fn validate(&self) -> Result<(), TuningError> {
        let bad = |m: &str| Err(TuningError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if !(self.exploration_std >= 0.0 && self.exploration_std.is_finite()) {
            return bad("exploration_std must be nonnegative");
        }
        if !(self.gradient_step > 0.0 && self.perturbation > 0.0) {
            return bad("gradient_step and perturbation must be positive");
        }
        if self.eval_states.is_empty() {
            return bad("eval_states is empty");
        }
        if self.max_update_norm.is_some_and(|m| !(m > 0.0)) {
            return bad("max_update_norm must be positive");
        }
        Ok(())
    }

    fn starts(&self) -> &[Vec<f64>] {
        if self.start_states.is_empty() {
            &self.eval_states
        } else {
            &self.start_states
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub cost: f64,
    pub s_next: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QStep {
    pub theta: ThetaVector,
    pub td_error: f64,
    /// The solver hit its iteration limit and theta was left unchanged.
    pub skipped: bool,
}

fn apply_update(theta: &ThetaVector, direction: &[f64], scale: f64, cfg: &LearningConfig) -> ThetaVector {
    let mut step: Vec<f64> = direction.iter().map(|d| scale * d).collect();
    if let Some(cap) = cfg.max_update_norm {
        let norm = step.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > cap {
            step.iter_mut().for_each(|v| *v *= cap / norm);
        }
    }
    let mut out = theta.clone();
    for (t, d) in out.values_mut().iter_mut().zip(&step) {
        *t += d;
    }
    out.apply_floor();
    out
}

/// `delta = cost + gamma V^(s') - Q^(s, a)` and
/// `theta' = theta + learning_rate * delta * grad Q^(s, a)`. The minimum over
/// the next action is the value of the unpinned program.
pub fn q_learning_step(
    scheme: &MpcScheme,
    theta: &ThetaVector,
    tr: &Transition,
    cfg: &LearningConfig,
) -> Result<QStep, TuningError> {
    let skip = |e: &MpcError| matches!(e, MpcError::MaxIterReached(_));
    let target = GradientTarget::QValue { action: tr.a.clone() };
    let grad = match theta_gradient(scheme, theta, &tr.s, &target, cfg.gradient_step, &cfg.solve) {
        Ok(g) => g,
        Err(e) if skip(&e) => {
            log::debug!("q-learning step skipped: {e}");
            return Ok(QStep {
                theta: theta.clone(),
                td_error: f64::NAN,
                skipped: true,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let v_next = match solve_value(scheme, theta, &tr.s_next, &cfg.solve) {
        Ok(v) => v.objective,
        Err(e) if skip(&e) => {
            log::debug!("q-learning step skipped: {e}");
            return Ok(QStep {
                theta: theta.clone(),
                td_error: f64::NAN,
                skipped: true,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let td_error = tr.cost + cfg.discount * v_next - grad.objective;
    if cfg.learning_rate == 0.0 {
        return Ok(QStep {
            theta: theta.clone(),
            td_error,
            skipped: false,
        });
    }
    let direction: Vec<f64> = grad
        .values
        .iter()
        .zip(&grad.usable)
        .map(|(&g, &u)| if u { g } else { 0.0 })
        .collect();
    Ok(QStep {
        theta: apply_update(theta, &direction, cfg.learning_rate * td_error, cfg),
        td_error,
        skipped: false,
    })
}

/// MPC policy, falling back to the incumbent when the solver stops early.
fn mpc_input(scheme: &MpcScheme, theta: &ThetaVector, s: &[f64], opts: &SolveOptions) -> Result<Vec<f64>, MpcError> {
    match policy(scheme, theta, s, opts) {
        Ok(a) => Ok(a),
        Err(e) => match e.incumbent() {
            Some(inc) => {
                log::debug!("using incumbent input: {e}");
                Ok(inc.first_input.clone())
            }
            None => Err(e),
        },
    }
}

/// Closed-loop cost estimate and largest violation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub j: f64,
    pub violation: f64,
}

/// Mean discounted closed-loop cost of the MPC policy over the evaluation
/// states and rollout seeds. The disturbance streams depend only on the
/// (state, seed) pair, so estimates at different theta share them.
pub fn closed_loop_cost<E: Environment>(
    env: &E,
    scheme: &MpcScheme,
    theta: &ThetaVector,
    cfg: &LearningConfig,
) -> Result<CostEstimate, TuningError> {
    let jobs: Vec<(usize, usize)> = (0..cfg.eval_states.len())
        .flat_map(|i| (0..cfg.rollout_seeds).map(move |r| (i, r)))
        .collect();
    let results: Vec<Result<(f64, f64), TuningError>> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let mut rng = stream(cfg.seed, ROLLOUT_STREAM + i as u64, r as u64);
            let out = rollout(
                env,
                |s| mpc_input(scheme, theta, s, &cfg.solve).map_err(|e| EnvError::Policy(e.to_string())),
                &cfg.eval_states[i],
                cfg.rollout_steps,
                cfg.discount,
                &mut rng,
            )?;
            Ok((out.discounted_cost, out.violation))
        })
        .collect();
    let mut total = 0.0;
    let mut violation: f64 = 0.0;
    for r in results {
        let (j, v) = r?;
        total += j;
        violation = violation.max(v);
    }
    Ok(CostEstimate {
        j: total / jobs.len() as f64,
        violation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchStep {
    pub theta: ThetaVector,
    /// `J` at the incoming theta.
    pub estimate: CostEstimate,
    pub gradient: Vec<f64>,
}

/// Two-point simultaneous-perturbation step on `J` with Rademacher
/// directions drawn from the stream of `step`.
pub fn policy_search_step<E: Environment>(
    env: &E,
    scheme: &MpcScheme,
    theta: &ThetaVector,
    cfg: &LearningConfig,
    step: usize,
) -> Result<SearchStep, TuningError> {
    let estimate = closed_loop_cost(env, scheme, theta, cfg)?;
    let mut rng = stream(cfg.seed, SPSA_STREAM, step as u64);
    let delta: Vec<f64> = (0..theta.len())
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let probe = |sign: f64| {
        let mut t = theta.clone();
        for (v, d) in t.values_mut().iter_mut().zip(&delta) {
            *v += sign * cfg.perturbation * d;
        }
        closed_loop_cost(env, scheme, &t, cfg)
    };
    let (plus, minus) = (probe(1.0)?, probe(-1.0)?);
    let slope = (plus.j - minus.j) / (2.0 * cfg.perturbation);
    let gradient: Vec<f64> = delta.iter().map(|d| slope * d).collect();
    let theta = if cfg.learning_rate == 0.0 || slope == 0.0 {
        theta.clone()
    } else {
        apply_update(theta, &gradient, -cfg.learning_rate, cfg)
    };
    Ok(SearchStep {
        theta,
        estimate,
        gradient,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// TD error (Q-learning) or `J` estimate (policy search).
    pub j_or_td: f64,
    pub theta_norm: f64,
    pub violation: f64,
    pub skipped: bool,
    /// `J` at the theta the step started from, when tracked.
    pub closed_loop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningTrace {
    pub records: Vec<TraceRecord>,
    pub snapshots: Vec<(usize, ThetaVector)>,
    pub final_theta: ThetaVector,
    pub aborted_episodes: usize,
}

impl LearningTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "j_or_td", "theta_norm", "violation"])?;
        for r in &self.records {
            w.serialize((r.step, r.j_or_td, r.theta_norm, r.violation))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn exploratory_input<E: Environment>(env: &E, a: &[f64], std: f64, rng: &mut InstanceRng) -> Vec<f64> {
    let noisy: Vec<f64> = a
        .iter()
        .map(|&v| {
            let w: f64 = StandardNormal.sample(rng);
            v + std * w
        })
        .collect();
    let (lo, hi) = (env.input_lower(), env.input_upper());
    noisy.iter().zip(lo.iter().zip(&hi)).map(|(&v, (&l, &h))| v.clamp(l, h)).collect()
}

/// Runs `episodes * steps_per_episode` learning steps. Q-learning updates
/// on each transition of exploratory episodes; policy search makes one
/// SPSA step per learning step.
pub fn run_learning<E: Environment>(
    env: &E,
    scheme: &MpcScheme,
    theta0: &ThetaVector,
    cfg: &LearningConfig,
) -> Result<LearningTrace, TuningError> {
    cfg.validate()?;
    let mut theta = theta0.clone();
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut aborted = 0;
    let snap = |step: usize, theta: &ThetaVector, snaps: &mut Vec<(usize, ThetaVector)>| {
        if cfg.snapshot_every.is_some_and(|k| k > 0 && step % k == 0) {
            snaps.push((step, theta.clone()));
        }
    };
    let mut step = 0;
    match cfg.algorithm {
        Algorithm::QLearning => {
            for e in 0..cfg.episodes {
                let starts = cfg.starts();
                let mut s = starts[e % starts.len()].clone();
                for t in 0..cfg.steps_per_episode {
                    let mut rng = stream(cfg.seed, EPISODE_STREAM + e as u64, t as u64);
                    let transition = (|| -> Result<Transition, TuningError> {
                        let a = mpc_input(scheme, &theta, &s, &cfg.solve)?;
                        let a = exploratory_input(env, &a, cfg.exploration_std, &mut rng);
                        let (s_next, cost) = env.step(&s, &a, &mut rng)?;
                        Ok(Transition {
                            s: s.clone(),
                            a,
                            cost,
                            s_next,
                        })
                    })();
                    let outcome = transition.and_then(|tr| Ok((q_learning_step(scheme, &theta, &tr, cfg)?, tr)));
                    let (q, tr) = match outcome {
                        Ok(v) => v,
                        Err(err) => {
                            log::warn!("episode {e} aborted at step {t}: {err}");
                            aborted += 1;
                            break;
                        }
                    };
                    snap(step, &theta, &mut snapshots);
                    let closed_loop = if cfg.track_closed_loop {
                        Some(closed_loop_cost(env, scheme, &theta, cfg)?.j)
                    } else {
                        None
                    };
                    theta = q.theta;
                    records.push(TraceRecord {
                        step,
                        j_or_td: q.td_error,
                        theta_norm: theta.norm(),
                        violation: env.violation(&tr.s_next),
                        skipped: q.skipped,
                        closed_loop,
                    });
                    step += 1;
                    s = tr.s_next;
                }
            }
        }
        Algorithm::PolicySearch => {
            for _ in 0..cfg.episodes * cfg.steps_per_episode {
                snap(step, &theta, &mut snapshots);
                let out = policy_search_step(env, scheme, &theta, cfg, step)?;
                theta = out.theta;
                records.push(TraceRecord {
                    step,
                    j_or_td: out.estimate.j,
                    theta_norm: theta.norm(),
                    violation: out.estimate.violation,
                    skipped: false,
                    closed_loop: Some(out.estimate.j),
                });
                step += 1;
            }
        }
    }
    if cfg.snapshot_every.is_some_and(|k| k > 0) && snapshots.last().is_none_or(|(k, _)| *k != step) {
        snapshots.push((step, theta.clone()));
    }
    Ok(LearningTrace {
        records,
        snapshots,
        final_theta: theta,
        aborted_episodes: aborted,
    })
}
