//! Box-constrained projected BFGS for small smooth problems.
//!
//! The search direction is quasi-Newton on the free variables, using the
//! free block of a BFGS Hessian model, and steepest descent on the variables
//! held at a bound (two-metric projection); steps
//! are projected onto the box and accepted by an Armijo test along the
//! projection arc. Stationarity is `|P(x - g) - x|_inf`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Option<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return None;
        }
        Some(Bounds { lower, upper })
    }

    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn project(&self, x: &mut [f64]) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = xi.clamp(self.lower[i], self.upper[i]);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lower[i] && v <= self.upper[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Options {
    pub max_iter: usize,
    /// Target for the projected-gradient residual.
    pub tol: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            max_iter: 500,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIter,
    /// No Armijo step even after resetting the curvature model.
    LineSearchFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub objective: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub residual: f64,
    pub status: Status,
    pub iterations: usize,
    pub evaluations: usize,
    pub trace: Vec<TracePoint>,
}

pub fn projected_residual(x: &[f64], g: &[f64], bounds: &Bounds) -> f64 {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&xi, &gi))| ((xi - gi).clamp(bounds.lower[i], bounds.upper[i]) - xi).abs())
        .fold(0.0, f64::max)
}

/// Central differences with step `step * max(1, |x_i|)`, shortened to stay
/// inside `bounds` when given.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    x: &[f64],
    step: f64,
    bounds: Option<&Bounds>,
    grad: &mut [f64],
) {
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        let (mut hi, mut lo) = (x[i] + h, x[i] - h);
        if let Some(b) = bounds {
            hi = hi.min(b.upper[i]);
            lo = lo.max(b.lower[i]);
        }
        xp[i] = hi;
        let fp = f(&xp);
        xp[i] = lo;
        let fm = f(&xp);
        xp[i] = x[i];
        grad[i] = if hi > lo { (fp - fm) / (hi - lo) } else { 0.0 };
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACK: usize = 60;

/// Minimises `f` over `bounds` from `x0` (projected first) with a BFGS
/// curvature model. `f` writes the gradient into its second argument and
/// returns the value.
pub fn minimize<F>(f: F, x0: &[f64], bounds: &Bounds, opts: &Options) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    run(f, None, x0, bounds, opts)
}

/// Projected Newton: as [`minimize`] but with the exact Hessian from
/// `hessian`, shifted when its free block is not positive definite.
pub fn minimize_newton<F, H>(f: F, mut hessian: H, x0: &[f64], bounds: &Bounds, opts: &Options) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    H: FnMut(&[f64]) -> DMatrix<f64>,
{
    run(f, Some(&mut hessian), x0, bounds, opts)
}

type HessianFn<'a> = &'a mut dyn FnMut(&[f64]) -> DMatrix<f64>;

fn run<F>(mut f: F, mut exact: Option<HessianFn>, x0: &[f64], bounds: &Bounds, opts: &Options) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evaluations = 1;
    let mut hess = match exact.as_mut() {
        Some(h) => h(&x),
        None => DMatrix::<f64>::identity(n, n),
    };
    let mut fresh = exact.is_none();
    let mut trace = Vec::new();
    let mut status = Status::MaxIter;
    let mut iterations = 0;
    let mut residual = projected_residual(&x, &g, bounds);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    while iterations < opts.max_iter {
        trace.push(TracePoint {
            iteration: iterations,
            objective: fx,
            residual,
        });
        if residual <= opts.tol {
            status = Status::Converged;
            break;
        }
        iterations += 1;

        let eps = residual.min(1e-3);
        let active: Vec<bool> = (0..n)
            .map(|i| {
                (x[i] - bounds.lower[i] <= eps && g[i] > 0.0)
                    || (bounds.upper[i] - x[i] <= eps && g[i] < 0.0)
            })
            .collect();
        let mut d = free_block_direction(&hess, &g, &active, exact.is_some());
        if d.as_ref().is_none_or(|d| dot(d, &g) >= 0.0) {
            if exact.is_none() {
                hess = DMatrix::identity(n, n);
                fresh = true;
            }
            d = None;
        }
        let newton = exact.is_some() && d.is_some();
        let d = d.unwrap_or_else(|| g.iter().map(|v| -v).collect());
        // Once the predicted decrease is below the rounding level of `f`, the
        // Armijo test is noise: take the full step if it shrinks the
        // residual, and stop otherwise.
        if newton && -dot(&d, &g) <= 4.0 * f64::EPSILON * fx.abs().max(1.0) {
            for i in 0..n {
                x_new[i] = x[i] + d[i];
            }
            bounds.project(&mut x_new);
            let f_trial = f(&x_new, &mut g_new);
            evaluations += 1;
            let r_new = projected_residual(&x_new, &g_new, bounds);
            if f_trial.is_finite() && r_new < residual {
                x.copy_from_slice(&x_new);
                g.copy_from_slice(&g_new);
                fx = f_trial;
                residual = r_new;
                if let Some(h) = exact.as_mut() {
                    hess = h(&x);
                }
                continue;
            }
            status = Status::Converged;
            break;
        }
        // Before any curvature information, cap the first trial step.
        let mut alpha = if fresh {
            (1.0 / inf_norm(&d)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = false;
        for _ in 0..MAX_BACKTRACK {
            for i in 0..n {
                x_new[i] = x[i] + alpha * d[i];
            }
            bounds.project(&mut x_new);
            let decrease: f64 = (0..n).map(|i| g[i] * (x_new[i] - x[i])).sum();
            let f_trial = f(&x_new, &mut g_new);
            evaluations += 1;
            if f_trial.is_finite() && f_trial <= fx + ARMIJO * decrease && decrease <= 0.0 {
                accepted = true;
                if let Some(h) = exact.as_mut() {
                    hess = h(&x_new);
                } else {
                    let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
                    let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
                    let sy = dot(&s, &y);
                    if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
                        if fresh {
                            hess = DMatrix::identity(n, n) * (dot(&y, &y) / sy);
                            fresh = false;
                        }
                        bfgs_update(&mut hess, &s, &y, sy);
                    }
                }
                x.copy_from_slice(&x_new);
                g.copy_from_slice(&g_new);
                fx = f_trial;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            if fresh || exact.is_some() {
                residual = projected_residual(&x, &g, bounds);
                status = Status::LineSearchFailed;
                break;
            }
            hess = DMatrix::identity(n, n);
            fresh = true;
        }
        residual = projected_residual(&x, &g, bounds);
    }
    if status == Status::MaxIter && residual <= opts.tol {
        status = Status::Converged;
    }
    if trace.last().map(|t| t.iteration) != Some(iterations) {
        trace.push(TracePoint {
            iteration: iterations,
            objective: fx,
            residual,
        });
    }
    Minimum {
        x,
        f: fx,
        grad: g,
        residual,
        status,
        iterations,
        evaluations,
        trace,
    }
}

/// `-B_FF^{-1} g_F` on the free coordinates and (diagonally scaled when
/// `scaled`) `-g` on the active ones. With `scaled` the free block is
/// shifted until it factors.
fn free_block_direction(hess: &DMatrix<f64>, g: &[f64], active: &[bool], scaled: bool) -> Option<Vec<f64>> {
    let n = g.len();
    let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
    let mut d: Vec<f64> = (0..n)
        .map(|i| {
            let h = hess[(i, i)];
            if scaled && h > 0.0 {
                -g[i] / h
            } else {
                -g[i]
            }
        })
        .collect();
    if free.is_empty() {
        return Some(d);
    }
    let k = free.len();
    let block = DMatrix::from_fn(k, k, |i, j| hess[(free[i], free[j])]);
    let rhs = DVector::from_fn(k, |i, _| -g[free[i]]);
    let chol = match block.clone().cholesky() {
        Some(c) => c,
        None if scaled => {
            let base = block.amax().max(1e-12);
            let mut found = None;
            for p in -10..=4 {
                let shifted = &block + DMatrix::identity(k, k) * (base * 10f64.powi(p));
                if let Some(c) = shifted.cholesky() {
                    found = Some(c);
                    break;
                }
            }
            found?
        }
        None => return None,
    };
    let sol = chol.solve(&rhs);
    for (i, &fi) in free.iter().enumerate() {
        d[fi] = sol[i];
    }
    Some(d)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `B <- B + y y' / s'y - (B s)(B s)' / s'B s`.
fn bfgs_update(b: &mut DMatrix<f64>, s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let sv = DVector::from_column_slice(s);
    let bs = &*b * &sv;
    let sbs = sv.dot(&bs);
    if sbs <= 0.0 {
        return;
    }
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] += y[i] * y[j] / sy - bs[i] * bs[j] / sbs;
        }
    }
}
