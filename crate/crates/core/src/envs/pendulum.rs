//! Inverted pendulum with a uniformly excited support, explicit Euler at
//! `dt`, and a value-iteration baseline on a state grid.

use std::io::Write;
use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{clip_input, EnvError, Environment};
use crate::lqr::{solve_discounted_riccati, LqrProblem};
use crate::mpc::{Dynamics, MpcError, MpcScheme, QuadraticForm, ThetaVector};
use crate::random::InstanceRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumEnv {
    pub g: f64,
    pub length: f64,
    pub mass: f64,
    pub dt: f64,
    pub xi_low: f64,
    pub xi_high: f64,
    /// Each state coordinate lies in `[-state_bound, state_bound]`.
    pub state_bound: f64,
    pub input_bound: f64,
    pub gamma: f64,
}

impl Default for PendulumEnv {
    fn default() -> Self {
        PendulumEnv {
            g: 9.81,
            length: 0.3,
            mass: 0.5,
            dt: 0.1,
            xi_low: -0.5,
            xi_high: 0.5,
            state_bound: 1.0,
            input_bound: 0.8,
            gamma: 0.95,
        }
    }
}

impl PendulumEnv {
    /// Successor for a given disturbance `xi`; `a` is taken as is.
    pub fn transition(&self, s: &[f64], a: f64, xi: f64) -> [f64; 2] {
        [
            s[0] + s[1] * self.dt,
            s[1] + (self.g / self.length + xi) * s[0].sin() * self.dt + self.dt / (self.mass * self.length * self.length) * a,
        ]
    }

    pub fn stage_cost(s: &[f64], a: f64) -> f64 {
        s[0] * s[0] + s[1] * s[1] + a * a
    }

    fn clamp_state(&self, s: [f64; 2]) -> [f64; 2] {
        let b = self.state_bound;
        [s[0].clamp(-b, b), s[1].clamp(-b, b)]
    }
}

impl Environment for PendulumEnv {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn input_lower(&self) -> Vec<f64> {
        vec![-self.input_bound]
    }

    fn input_upper(&self) -> Vec<f64> {
        vec![self.input_bound]
    }

    fn step(&self, s: &[f64], a: &[f64], rng: &mut InstanceRng) -> Result<(Vec<f64>, f64), EnvError> {
        if s.len() != 2 {
            return Err(EnvError::Shape { expected: 2, got: s.len() });
        }
        if a.len() != 1 {
            return Err(EnvError::Shape { expected: 1, got: a.len() });
        }
        if s.iter().chain(a).any(|v| !v.is_finite()) {
            return Err(EnvError::NonFinite);
        }
        let a = clip_input(a, &self.input_lower(), &self.input_upper())[0];
        let xi = rng.random_range(self.xi_low..=self.xi_high);
        Ok((self.transition(s, a, xi).to_vec(), Self::stage_cost(s, a)))
    }

    fn violation(&self, s: &[f64]) -> f64 {
        s.iter().map(|v| (v.abs() - self.state_bound).max(0.0)).sum()
    }
}

/// The MPC scheme on the pendulum linearised at the upright position, with
/// `theta = {theta_l, G, H}`: terminal cost `s'Gs`, stage cost
/// `[s; a]' H [s; a]` and the input box of `env`.
pub fn pendulum_scheme(env: &PendulumEnv, horizon: usize) -> MpcScheme {
    MpcScheme::new(
        horizon,
        2,
        1,
        Dynamics::LinearizedPendulum {
            g: env.g,
            mass: env.mass,
            dt: env.dt,
            slice: "theta_l".into(),
        },
        QuadraticForm::Factor { slice: "H".into() },
        QuadraticForm::Factor { slice: "G".into() },
    )
    .with_input_box(env.input_lower(), env.input_upper())
}

pub fn pendulum_theta(theta_l: f64, g: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<ThetaVector, MpcError> {
    ThetaVector::new()
        .with("theta_l", &[theta_l])?
        .with_factor("G", g)?
        .with_factor("H", h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub nodes_per_dim: usize,
    pub actions: usize,
    pub quadrature_order: usize,
    /// Weight of `|s+ - clamp(s+)|^2`, charged when a successor leaves the
    /// state box.
    pub boundary_penalty: f64,
    /// Interpolate `V - s'Ps` with `P` from the discounted LQR of the
    /// linearised plant instead of `V` itself.
    pub quadratic_offset: bool,
    /// Policy-evaluation sweeps between greedy backups.
    pub evaluation_sweeps: usize,
    pub tol: f64,
    /// Greedy backups allowed.
    pub max_iter: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nodes_per_dim: 41,
            actions: 17,
            quadrature_order: 5,
            boundary_penalty: 100.0,
            quadratic_offset: true,
            evaluation_sweeps: 30,
            tol: 1e-6,
            max_iter: 10_000,
        }
    }
}

/// Value-iteration solution on a tensor grid, row-major in `(s1, s2)`.
/// `q_grid` holds the lookahead at `actions`; `policy_grid` is the refined
/// continuous minimiser, so its value never exceeds the row minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDpBaseline {
    pub env: PendulumEnv,
    pub spec: GridSpec,
    pub grid: Grid,
    pub actions: Vec<f64>,
    pub quadrature: Vec<(f64, f64)>,
    pub v_grid: Vec<f64>,
    pub q_grid: Vec<Vec<f64>>,
    pub policy_grid: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Bracketing cell and offset of `x` on the uniform `nodes`.
fn locate(nodes: &[f64], x: f64) -> (usize, f64) {
    let n = nodes.len();
    if n == 1 {
        return (0, 0.0);
    }
    let (lo, hi) = (nodes[0], nodes[n - 1]);
    let x = x.clamp(lo, hi);
    let pos = (x - lo) / (hi - lo) * (n - 1) as f64;
    let i = (pos.floor() as usize).min(n - 2);
    (i, pos - i as f64)
}

/// Corner indices and weights of the multilinear interpolant at `s`.
fn stencil(grid: &[Vec<f64>; 2], s: [f64; 2]) -> [(usize, f64); 4] {
    let n2 = grid[1].len();
    let (i, u) = locate(&grid[0], s[0]);
    let (j, w) = locate(&grid[1], s[1]);
    let i1 = (i + 1).min(grid[0].len() - 1);
    let j1 = (j + 1).min(n2 - 1);
    [
        (i * n2 + j, (1.0 - u) * (1.0 - w)),
        (i * n2 + j1, (1.0 - u) * w),
        (i1 * n2 + j, u * (1.0 - w)),
        (i1 * n2 + j1, u * w),
    ]
}

/// One-step lookahead `l(s, a) + E[penalty + gamma V(s+)]` for the grid
/// values `v`.
fn lookahead(env: &PendulumEnv, spec: &GridSpec, grid: &Grid, quad: &[(f64, f64)], v: &[f64], s: &[f64], a: f64) -> f64 {
    let mut c = PendulumEnv::stage_cost(s, a);
    for &(xi, w) in quad {
        let next = env.transition(s, a, xi);
        let clamped = env.clamp_state(next);
        let d2 = (next[0] - clamped[0]).powi(2) + (next[1] - clamped[1]).powi(2);
        c += w * (spec.boundary_penalty * d2 + env.gamma * grid.interpolate(v, clamped));
    }
    c
}

/// Tensor grid with a quadratic `s'Ps` taken out before interpolating:
/// the residual `V - s'Ps` is interpolated multilinearly and the quadratic
/// is added back exactly. The weights stay nonnegative, so value iteration
/// keeps its contraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nodes: [Vec<f64>; 2],
    pub offset: [[f64; 2]; 2],
    /// `s'Ps` at every node, row-major.
    #[serde(skip)]
    node_offset: Vec<f64>,
}

impl Grid {
    fn new(nodes: [Vec<f64>; 2], offset: [[f64; 2]; 2]) -> Self {
        let mut g = Grid {
            nodes,
            offset,
            node_offset: Vec::new(),
        };
        g.node_offset = g.states().iter().map(|s| g.quadratic(*s)).collect();
        g
    }

    fn quadratic(&self, s: [f64; 2]) -> f64 {
        let p = &self.offset;
        p[0][0] * s[0] * s[0] + (p[0][1] + p[1][0]) * s[0] * s[1] + p[1][1] * s[1] * s[1]
    }

    fn states(&self) -> Vec<[f64; 2]> {
        let n2 = self.nodes[1].len();
        (0..self.nodes[0].len() * n2)
            .map(|k| [self.nodes[0][k / n2], self.nodes[1][k % n2]])
            .collect()
    }

    /// `V(s)` from node values `v`, with `s` clamped to the grid.
    pub fn interpolate(&self, v: &[f64], s: [f64; 2]) -> f64 {
        let lo = [self.nodes[0][0], self.nodes[1][0]];
        let hi = [self.nodes[0][self.nodes[0].len() - 1], self.nodes[1][self.nodes[1].len() - 1]];
        let c = [s[0].clamp(lo[0], hi[0]), s[1].clamp(lo[1], hi[1])];
        let r: f64 = stencil(&self.nodes, c)
            .iter()
            .map(|&(idx, w)| w * (v[idx] - self.node_offset[idx]))
            .sum();
        r + self.quadratic(c)
    }
}

/// Minimises `f` over the input box: the best of `actions`, refined by
/// golden-section search between its neighbours. Returns `(a, f(a))` and
/// the values at `actions`.
fn minimise_input(actions: &[f64], f: impl Fn(f64) -> f64) -> (f64, f64, Vec<f64>) {
    let qs: Vec<f64> = actions.iter().map(|&a| f(a)).collect();
    let k = crate::ext::argmin(&qs).map_or(0, |(k, _)| k);
    let (mut a, mut b) = (actions[k.saturating_sub(1)], actions[(k + 1).min(actions.len() - 1)]);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > ACTION_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    if fx <= qs[k] {
        (x, fx, qs)
    } else {
        (actions[k], qs[k], qs)
    }
}

/// Discounted LQR value matrix of the plant linearised at the origin with
/// the nominal (zero) disturbance and no input box.
fn lqr_offset(env: &PendulumEnv) -> Result<[[f64; 2]; 2], EnvError> {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, env.dt, env.g / env.length * env.dt, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, env.dt / (env.mass * env.length * env.length)]);
    let problem = LqrProblem::from_blocks(
        a,
        b,
        &DMatrix::identity(2, 2),
        &DMatrix::zeros(2, 1),
        &DMatrix::identity(1, 1),
        DMatrix::zeros(2, 2),
        env.gamma,
    )
    .map_err(|e| EnvError::Policy(e.to_string()))?;
    let sol = solve_discounted_riccati(&problem, 1e-13, 1_000_000).map_err(|e| EnvError::Policy(e.to_string()))?;
    let p = &sol.s_mat;
    Ok([[p[(0, 0)], p[(0, 1)]], [p[(1, 0)], p[(1, 1)]]])
}

/// Width at which the golden-section refinement of the input stops.
const ACTION_TOL: f64 = 1e-7;

/// Value iteration with Gauss-Legendre expectation over `xi`. Successors
/// leaving the state box are clamped onto it and charged the boundary
/// penalty. The minimisation over the input is continuous: the best grid
/// action is refined by golden-section search.
pub fn pendulum_dp(env: &PendulumEnv, spec: &GridSpec) -> Result<GridDpBaseline, EnvError> {
    let order = NonZeroUsize::new(spec.quadrature_order).ok_or(EnvError::Domain(vec![0.0]))?;
    if spec.nodes_per_dim < 2 || spec.actions < 2 {
        return Err(EnvError::Domain(vec![spec.nodes_per_dim as f64, spec.actions as f64]));
    }
    let b = env.state_bound;
    let grid = Grid::new(
        [linspace(-b, b, spec.nodes_per_dim), linspace(-b, b, spec.nodes_per_dim)],
        if spec.quadratic_offset { lqr_offset(env)? } else { [[0.0; 2]; 2] },
    );
    let actions = linspace(-env.input_bound, env.input_bound, spec.actions);
    let half = 0.5 * (env.xi_high - env.xi_low);
    let mid = 0.5 * (env.xi_high + env.xi_low);
    // Uniform density 1/(2 half) times the Jacobian `half`.
    let quadrature: Vec<(f64, f64)> = GaussLegendre::new(order)
        .iter()
        .map(|(x, w)| (mid + half * x, 0.5 * w))
        .collect();
    let states = grid.states();

    let backup = |v: &[f64]| -> Vec<(f64, f64, Vec<f64>)> {
        states
            .par_iter()
            .map(|s| minimise_input(&actions, |a| lookahead(env, spec, &grid, &quadrature, v, s, a)))
            .collect()
    };
    // Modified policy iteration: a greedy backup, which also measures the
    // Bellman residual, then cheap sweeps under the greedy inputs.
    let mut v = vec![0.0; states.len()];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < spec.max_iter {
        let next = backup(&v);
        iterations += 1;
        residual = 0.0;
        for (vi, (_, q, _)) in v.iter_mut().zip(&next) {
            residual = f64::max(residual, (q - *vi).abs());
            *vi = *q;
        }
        if residual <= spec.tol {
            break;
        }
        let inputs: Vec<f64> = next.iter().map(|r| r.0).collect();
        for _ in 0..spec.evaluation_sweeps {
            v = states
                .par_iter()
                .zip(&inputs)
                .map(|(s, &a)| lookahead(env, spec, &grid, &quadrature, &v, s, a))
                .collect();
        }
    }
    if residual > spec.tol {
        return Err(EnvError::NonConvergence { iterations, residual });
    }
    let last = backup(&v);
    let policy_grid = last.iter().map(|r| r.0).collect();
    let q_grid = last.into_iter().map(|r| r.2).collect();
    Ok(GridDpBaseline {
        env: env.clone(),
        spec: spec.clone(),
        grid,
        actions,
        quadrature,
        v_grid: v,
        q_grid,
        policy_grid,
        residual,
        iterations,
    })
}

impl GridDpBaseline {
    /// Multilinear interpolant of `V` (clamped to the box).
    pub fn value_at(&self, s: &[f64]) -> f64 {
        self.grid.interpolate(&self.v_grid, [s[0], s[1]])
    }

    /// One-step lookahead `l(s, a) + E[penalty + gamma V(s+)]`.
    pub fn q_at(&self, s: &[f64], a: f64) -> f64 {
        lookahead(&self.env, &self.spec, &self.grid, &self.quadrature, &self.v_grid, s, a)
    }

    /// Greedy input of the lookahead at any state.
    pub fn policy_at(&self, s: &[f64]) -> f64 {
        minimise_input(&self.actions, |a| self.q_at(s, a)).0
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s1", "s2", "v", "policy"])?;
        for (node, s) in self.grid.states().iter().enumerate() {
            w.serialize((s[0], s[1], self.v_grid[node], self.policy_grid[node]))?;
        }
        w.flush()?;
        Ok(())
    }
}
