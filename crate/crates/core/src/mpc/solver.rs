use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use super::scheme::{Compiled, Linearisation, MpcScheme, Penalty};
use super::theta::ThetaVector;
use super::MpcError;
use crate::optim::{self, Bounds, TracePoint};
use crate::random::stream;

/// Projected-gradient residual below which a solve counts as converged.
pub const STATIONARITY_TOL: f64 = 1e-7;

/// Softplus sharpness used in turn when the scheme has constraints. The
/// smoothed minimiser then seeds an exact active-set solve.
pub const SMOOTHING_SCHEDULE: [f64; 2] = [1e4, 1e6];

/// Rows within this distance of their kink start out pinned to it.
const KINK_BAND: f64 = 1e-4;

const START_STREAM: u64 = 0x6d70_6373;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub seed: u64,
    pub random_starts: usize,
    pub include_zero_start: bool,
    /// Full stacked input sequence (`N * input_dim`) used as an extra start.
    pub warm_start: Option<Vec<f64>>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            seed: 0,
            random_starts: 3,
            include_zero_start: true,
            warm_start: None,
            max_iter: 500,
            tol: 1e-10,
        }
    }
}

impl SolveOptions {
    /// A single start from `warm`.
    pub fn warm_only(&self, warm: Vec<f64>) -> Self {
        SolveOptions {
            random_starts: 0,
            include_zero_start: false,
            warm_start: Some(warm),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// Path slacks for stages `0..N-1`, then the terminal slack.
    pub slacks: Vec<Vec<f64>>,
    /// `V^_N(s)`, including `-lambda(s_0)`.
    pub objective: f64,
    pub storage_value: f64,
    pub first_input: Vec<f64>,
    pub solver_status: SolverStatus,
    pub stationarity_residual: f64,
    #[serde(skip)]
    pub trace: Vec<TracePoint>,
}

impl MpcSolution {
    pub fn stacked_inputs(&self) -> Vec<f64> {
        self.inputs.iter().flatten().copied().collect()
    }

    pub fn max_slack(&self) -> f64 {
        self.slacks.iter().flatten().fold(0.0, |m, &v| m.max(v))
    }
}

/// Solver trace of the selected start as CSV.
pub fn write_trace_csv<W: Write>(sol: &MpcSolution, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "objective", "residual"])?;
    for t in &sol.trace {
        w.serialize((t.iteration, t.objective, t.residual))?;
    }
    w.flush()?;
    Ok(())
}

struct Program<'a> {
    compiled: Compiled,
    s0: &'a [f64],
    pinned: Option<&'a [f64]>,
    bounds: Bounds,
    /// Linearisation restricted to the free inputs, with the pinned input
    /// folded into the row offsets.
    lin: Linearisation,
}

/// Exact minimiser found by the active-set solve.
struct Polished {
    x: Vec<f64>,
    residual: f64,
}

impl<'a> Program<'a> {
    fn new(compiled: Compiled, s0: &'a [f64], pinned: Option<&'a [f64]>, bounds: Bounds) -> Self {
        let full = compiled.linearise(s0);
        let skip = pinned.map_or(0, <[f64]>::len);
        let dim = full.hessian.ncols() - skip;
        let mut offset = full.offset.clone();
        if let Some(a) = pinned {
            offset += full.jacobian.columns(0, skip) * DVector::from_column_slice(a);
        }
        let lin = Linearisation {
            hessian: full.hessian.view((skip, skip), (dim, dim)).into_owned(),
            jacobian: full.jacobian.columns(skip, dim).into_owned(),
            offset,
            weights: full.weights,
        };
        Program {
            compiled,
            s0,
            pinned,
            bounds,
            lin,
        }
    }

    fn full_inputs(&self, x: &[f64]) -> Vec<f64> {
        match self.pinned {
            Some(a) => a.iter().chain(x).copied().collect(),
            None => x.to_vec(),
        }
    }

    fn value(&self, x: &[f64], penalty: Penalty, grad: Option<&mut [f64]>) -> f64 {
        let u = self.full_inputs(x);
        match grad {
            None => self.compiled.evaluate(self.s0, &u, penalty, None).0,
            Some(g) => {
                let mut gu = vec![0.0; u.len()];
                let (f, _) = self.compiled.evaluate(self.s0, &u, penalty, Some(&mut gu));
                let skip = u.len() - x.len();
                g.copy_from_slice(&gu[skip..]);
                f
            }
        }
    }

    fn rows(&self, x: &[f64]) -> DVector<f64> {
        &self.lin.jacobian * DVector::from_column_slice(x) + &self.lin.offset
    }

    fn smoothed_hessian(&self, x: &[f64], beta: f64) -> DMatrix<f64> {
        let h = self.rows(x);
        let mut out = self.lin.hessian.clone();
        for r in 0..h.len() {
            let t = beta * h[r];
            let sig = 1.0 / (1.0 + (-t.abs()).exp());
            let curv = self.lin.weights[r] * beta * sig * (1.0 - sig);
            if curv > 0.0 {
                let row = self.lin.jacobian.row(r);
                out += row.transpose() * row * curv;
            }
        }
        out
    }

    /// Minimises from `x0`, through the smoothing schedule when constrained.
    fn descend(&self, x0: &[f64], opts: &SolveOptions) -> optim::Minimum {
        let o = optim::Options {
            max_iter: opts.max_iter,
            tol: opts.tol,
        };
        if !self.compiled.has_constraints() {
            return optim::minimize_newton(
                |x, g| self.value(x, Penalty::Exact, Some(g)),
                |_| self.lin.hessian.clone(),
                x0,
                &self.bounds,
                &o,
            );
        }
        let mut x = x0.to_vec();
        let mut trace = Vec::new();
        let mut last = None;
        for beta in SMOOTHING_SCHEDULE {
            let m = optim::minimize_newton(
                |x, g| self.value(x, Penalty::Softplus(beta), Some(g)),
                |x| self.smoothed_hessian(x, beta),
                &x,
                &self.bounds,
                &o,
            );
            let offset = trace.len();
            trace.extend(m.trace.iter().map(|t| TracePoint {
                iteration: t.iteration + offset,
                ..*t
            }));
            x.clone_from(&m.x);
            last = Some(m);
        }
        let mut m = last.expect("non-empty schedule");
        m.trace = trace;
        m
    }

    /// Exact minimiser of the kinked program near `x`: every row is either
    /// inactive, penalised, or held at its kink with a multiplier in
    /// `[0, mu]`, and every input is free or at a bound. Classes are
    /// exchanged one violation at a time until the conditions hold.
    fn polish(&self, x: &[f64]) -> Option<Polished> {
        #[derive(Clone, Copy, PartialEq)]
        enum Row {
            Inactive,
            Kink,
            Penalised,
        }
        #[derive(Clone, Copy, PartialEq)]
        enum Var {
            Free,
            Lower,
            Upper,
        }
        let dim = x.len();
        let nrows = self.lin.offset.len();
        let h0 = self.rows(x);
        let mut rows: Vec<Row> = h0
            .iter()
            .map(|&h| {
                if h.abs() <= KINK_BAND {
                    Row::Kink
                } else if h > 0.0 {
                    Row::Penalised
                } else {
                    Row::Inactive
                }
            })
            .collect();
        let b = &self.bounds;
        let mut vars: Vec<Var> = (0..dim)
            .map(|i| {
                if x[i] - b.lower[i] <= 1e-9 {
                    Var::Lower
                } else if b.upper[i] - x[i] <= 1e-9 {
                    Var::Upper
                } else {
                    Var::Free
                }
            })
            .collect();
        let scale = self.lin.hessian.amax().max(1.0);
        let tol = 1e-10 * scale;
        let mut xc = x.to_vec();
        for _ in 0..4 * (nrows + dim) + 8 {
            let kink: Vec<usize> = (0..nrows).filter(|&r| rows[r] == Row::Kink).collect();
            let free: Vec<usize> = (0..dim).filter(|&i| vars[i] == Var::Free).collect();
            for i in 0..dim {
                match vars[i] {
                    Var::Lower => xc[i] = b.lower[i],
                    Var::Upper => xc[i] = b.upper[i],
                    Var::Free => {}
                }
            }
            // Gradient of the smooth part plus the penalised rows.
            let mut g = vec![0.0; dim];
            self.value(&xc, Penalty::Omit, Some(&mut g));
            let mut g = DVector::from_vec(g);
            for r in 0..nrows {
                if rows[r] == Row::Penalised {
                    g += self.lin.jacobian.row(r).transpose() * self.lin.weights[r];
                }
            }
            let h = self.rows(&xc);
            let (nf, nk) = (free.len(), kink.len());
            let mut kkt = DMatrix::zeros(nf + nk, nf + nk);
            let mut rhs = DVector::zeros(nf + nk);
            for (i, &fi) in free.iter().enumerate() {
                for (j, &fj) in free.iter().enumerate() {
                    kkt[(i, j)] = self.lin.hessian[(fi, fj)];
                }
                for (j, &r) in kink.iter().enumerate() {
                    kkt[(i, nf + j)] = self.lin.jacobian[(r, fi)];
                    kkt[(nf + j, i)] = self.lin.jacobian[(r, fi)];
                }
                rhs[i] = -g[fi];
            }
            for (j, &r) in kink.iter().enumerate() {
                rhs[nf + j] = -h[r];
            }
            let sol = if nf + nk == 0 {
                DVector::zeros(0)
            } else {
                kkt.svd(true, true).solve(&rhs, 1e-13 * scale).ok()?
            };
            let mut xn = xc.clone();
            for (i, &fi) in free.iter().enumerate() {
                xn[fi] += sol[i];
            }
            let mut nu = vec![0.0; nrows];
            for (j, &r) in kink.iter().enumerate() {
                nu[r] = sol[nf + j];
            }
            let hn = self.rows(&xn);
            let mut gn = g.clone() + self.lin.hessian.columns(0, dim) * DVector::from_iterator(dim, (0..dim).map(|i| xn[i] - xc[i]));
            for &r in &kink {
                gn += self.lin.jacobian.row(r).transpose() * nu[r];
            }
            xc = xn;

            // Primal violations first, then the worst dual one.
            if let Some(i) = (0..dim).find(|&i| xc[i] < b.lower[i] - 1e-12 || xc[i] > b.upper[i] + 1e-12) {
                vars[i] = if xc[i] < b.lower[i] { Var::Lower } else { Var::Upper };
                continue;
            }
            let primal = (0..nrows)
                .filter_map(|r| match rows[r] {
                    Row::Inactive if hn[r] > tol => Some((hn[r], r, Row::Kink)),
                    Row::Penalised if hn[r] < -tol => Some((-hn[r], r, Row::Kink)),
                    _ => None,
                })
                .max_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, r, c)) = primal {
                rows[r] = c;
                continue;
            }
            let mut worst: Option<(f64, Option<(usize, Row)>, Option<usize>)> = None;
            let mut consider = |v: f64, row: Option<(usize, Row)>, var: Option<usize>| {
                if v > tol && worst.as_ref().is_none_or(|w| v > w.0) {
                    worst = Some((v, row, var));
                }
            };
            for &r in &kink {
                let w = self.lin.weights[r];
                if nu[r] < 0.0 {
                    consider(-nu[r], Some((r, Row::Inactive)), None);
                } else if nu[r] > w {
                    consider(nu[r] - w, Some((r, Row::Penalised)), None);
                }
            }
            for i in 0..dim {
                match vars[i] {
                    Var::Lower => consider(-gn[i], None, Some(i)),
                    Var::Upper => consider(gn[i], None, Some(i)),
                    Var::Free => {}
                }
            }
            match worst {
                Some((_, Some((r, c)), _)) => rows[r] = c,
                Some((_, None, Some(i))) => vars[i] = Var::Free,
                _ => {
                    let residual = optim::projected_residual(&xc, gn.as_slice(), b);
                    return Some(Polished { x: xc, residual });
                }
            }
        }
        None
    }
}

fn starts(program: &Program, opts: &SolveOptions) -> Vec<Vec<f64>> {
    let dim = program.bounds.len();
    let skip = program.pinned.map_or(0, |a| a.len());
    let b = &program.bounds;
    let mut out = Vec::new();
    if opts.include_zero_start {
        let mut z = vec![0.0; dim];
        b.project(&mut z);
        out.push(z);
    }
    if let Some(w) = &opts.warm_start {
        if w.len() == dim + skip {
            let mut z = w[skip..].to_vec();
            b.project(&mut z);
            out.push(z);
        } else {
            log::warn!("ignoring warm start of length {} (expected {})", w.len(), dim + skip);
        }
    }
    for i in 0..opts.random_starts {
        let mut rng = stream(opts.seed, START_STREAM, i as u64);
        let z = (0..dim)
            .map(|j| {
                let lo = b.lower[j].max(-1.0);
                let hi = b.upper[j].min(1.0);
                if lo < hi {
                    rng.random_range(lo..hi)
                } else {
                    0.0f64.clamp(b.lower[j], b.upper[j])
                }
            })
            .collect();
        out.push(z);
    }
    if out.is_empty() {
        let mut z = vec![0.0; dim];
        b.project(&mut z);
        out.push(z);
    }
    out
}

fn solve_program(
    scheme: &MpcScheme,
    theta: &ThetaVector,
    s: &[f64],
    pinned: Option<&[f64]>,
    opts: &SolveOptions,
) -> Result<MpcSolution, MpcError> {
    let compiled = scheme.compile(theta)?;
    let (n, m, horizon) = (compiled.n, compiled.m, compiled.horizon);
    if s.len() != n {
        return Err(MpcError::InvalidScheme(format!(
            "state has {} entries, state_dim is {n}",
            s.len()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(MpcError::NonFiniteState);
    }
    if let Some(a) = pinned {
        let inside = a.len() == m
            && a.iter()
                .enumerate()
                .all(|(j, &v)| v >= scheme.input_lower[j] && v <= scheme.input_upper[j]);
        if !inside {
            return Err(MpcError::InputOutOfBox(a.to_vec()));
        }
    }
    let free_stages = horizon - usize::from(pinned.is_some());
    let mut lower = Vec::with_capacity(free_stages * m);
    let mut upper = Vec::with_capacity(free_stages * m);
    for _ in 0..free_stages {
        lower.extend_from_slice(&scheme.input_lower);
        upper.extend_from_slice(&scheme.input_upper);
    }
    let bounds = Bounds::new(lower, upper).ok_or(MpcError::InfeasibleBox)?;
    let program = Program::new(compiled, s, pinned, bounds);

    let mut best: Option<(f64, optim::Minimum)> = None;
    if free_stages == 0 {
        let f = program.value(&[], Penalty::Exact, None);
        best = Some((
            f,
            optim::Minimum {
                x: Vec::new(),
                f,
                grad: Vec::new(),
                residual: 0.0,
                status: optim::Status::Converged,
                iterations: 0,
                evaluations: 1,
                trace: vec![TracePoint {
                    iteration: 0,
                    objective: f,
                    residual: 0.0,
                }],
            },
        ));
    } else {
        for x0 in starts(&program, opts) {
            let mut result = program.descend(&x0, opts);
            let mut exact = program.value(&result.x, Penalty::Exact, None);
            if program.compiled.has_constraints() || result.residual > STATIONARITY_TOL {
                if let Some(p) = program.polish(&result.x) {
                    let f = program.value(&p.x, Penalty::Exact, None);
                    if f <= exact + 1e-12 * exact.abs().max(1.0) {
                        exact = f;
                        result.x = p.x;
                        result.residual = p.residual;
                        result.f = f;
                    }
                }
            }
            if !exact.is_finite() {
                continue;
            }
            if best.as_ref().is_none_or(|(f, _)| exact < *f) {
                best = Some((exact, result));
            }
        }
    }
    let (exact, result) = best.ok_or(MpcError::NonFiniteModel)?;
    let u = program.full_inputs(&result.x);
    let (_, rollout) = program.compiled.evaluate(s, &u, Penalty::Exact, None);
    if rollout.states.iter().any(|v| !v.is_finite()) {
        return Err(MpcError::NonFiniteModel);
    }
    let storage_value = scheme.storage.value(theta, s)?;
    let rows = scheme.path_constraint.rows();
    let mut slacks: Vec<Vec<f64>> = (0..horizon)
        .map(|k| rollout.slacks[k * rows..(k + 1) * rows].to_vec())
        .collect();
    slacks.push(rollout.terminal_slacks.clone());
    let solution = MpcSolution {
        states: rollout.states.chunks(n).map(<[f64]>::to_vec).collect(),
        inputs: u.chunks(m).map(<[f64]>::to_vec).collect(),
        slacks,
        objective: exact - storage_value,
        storage_value,
        first_input: u[..m].to_vec(),
        solver_status: if result.residual <= STATIONARITY_TOL {
            SolverStatus::Converged
        } else {
            SolverStatus::MaxIter
        },
        stationarity_residual: result.residual,
        trace: result.trace,
    };
    if solution.max_slack() > 0.0 {
        log::debug!("soft constraints active, max slack {:e}", solution.max_slack());
    }
    match solution.solver_status {
        SolverStatus::Converged => Ok(solution),
        SolverStatus::MaxIter => Err(MpcError::MaxIterReached(Box::new(solution))),
    }
}

/// `V^_N(s)` and the minimising trajectory.
pub fn solve_value(
    scheme: &MpcScheme,
    theta: &ThetaVector,
    s: &[f64],
    opts: &SolveOptions,
) -> Result<MpcSolution, MpcError> {
    solve_program(scheme, theta, s, None, opts)
}

/// First optimal input.
pub fn policy(
    scheme: &MpcScheme,
    theta: &ThetaVector,
    s: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<f64>, MpcError> {
    Ok(solve_value(scheme, theta, s, opts)?.first_input)
}

/// `Q^_N(s, a)`: the same program with the first input pinned to `a`.
pub fn q_value(
    scheme: &MpcScheme,
    theta: &ThetaVector,
    s: &[f64],
    a: &[f64],
    opts: &SolveOptions,
) -> Result<MpcSolution, MpcError> {
    solve_program(scheme, theta, s, Some(a), opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GradientTarget {
    Value,
    QValue { action: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaGradient {
    pub values: Vec<f64>,
    /// False where either perturbed solve failed; the entry is then zero.
    pub usable: Vec<bool>,
    pub objective: f64,
    pub inputs: Vec<f64>,
}

fn solve_target(
    scheme: &MpcScheme,
    theta: &ThetaVector,
    s: &[f64],
    target: &GradientTarget,
    opts: &SolveOptions,
) -> Result<MpcSolution, MpcError> {
    match target {
        GradientTarget::Value => solve_value(scheme, theta, s, opts),
        GradientTarget::QValue { action } => q_value(scheme, theta, s, action, opts),
    }
}

/// Central differences of the target objective in every theta entry, with
/// step `step * max(1, |theta_i|)` and re-solves warm-started at the base
/// solution.
pub fn theta_gradient(
    scheme: &MpcScheme,
    theta: &ThetaVector,
    s: &[f64],
    target: &GradientTarget,
    step: f64,
    opts: &SolveOptions,
) -> Result<ThetaGradient, MpcError> {
    let base = solve_target(scheme, theta, s, target, opts)?;
    let warm = opts.warm_only(base.stacked_inputs());
    let mut values = vec![0.0; theta.len()];
    let mut usable = vec![false; theta.len()];
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let t = theta.values()[i];
        let h = step * t.abs().max(1.0);
        probe.values_mut()[i] = t + h;
        let fp = solve_target(scheme, &probe, s, target, &warm);
        probe.values_mut()[i] = t - h;
        let fm = solve_target(scheme, &probe, s, target, &warm);
        probe.values_mut()[i] = t;
        match (fp, fm) {
            (Ok(p), Ok(q)) => {
                values[i] = (p.objective - q.objective) / (2.0 * h);
                usable[i] = true;
            }
            (p, q) => {
                let e = p.err().or(q.err()).expect("one side failed");
                log::debug!("theta entry {i} unusable: {e}");
            }
        }
    }
    Ok(ThetaGradient {
        values,
        usable,
        objective: base.objective,
        inputs: base.stacked_inputs(),
    })
}
