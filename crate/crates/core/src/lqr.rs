//! Discounted LQR on a linear-Gaussian plant, the modified quadratic costs
//! for a mismatched deterministic linear model, and the undiscounted model
//! Riccati equation whose solution coincides with the discounted one.
//!
//! Conventions: `u = -K s` with `K` of shape `m x n`; the stage cost is
//! `[s; a]' [T N; N' R] [s; a]`; matrix norms are max-abs entries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-13;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;

/// Discount used for the `gamma -> 1` limit gain.
pub const UNDISCOUNTED_LIMIT_GAMMA: f64 = 1.0 - 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LqrError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("Riccati iteration did not converge in {iterations} iterations (change {change:e})")]
    NonConvergence { iterations: usize, change: f64 },
    #[error("R + gamma B'SB is not positive definite at iteration {0}")]
    IndefiniteInnerBlock(usize),
    #[error("converged gain does not stabilise the model (spectral radius {0})")]
    NotStabilizing(f64),
}

/// Row-major nested-array (de)serialisation for `DMatrix<f64>`.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        from_rows(&rows).map_err(de::Error::custom)
    }
}

fn sup(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Linear-Gaussian plant `s+ = A s + B a + e`, `e ~ N(0, sigma)`, with
/// quadratic stage cost and discount `gamma` in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrProblem {
    #[serde(with = "matrix_rows")]
    pub a_mat: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub b_mat: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub cost_block: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub sigma: DMatrix<f64>,
    pub gamma: f64,
}

impl LqrProblem {
    pub fn new(
        a_mat: DMatrix<f64>,
        b_mat: DMatrix<f64>,
        cost_block: DMatrix<f64>,
        sigma: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self, LqrError> {
        let p = LqrProblem {
            a_mat,
            b_mat,
            cost_block,
            sigma,
            gamma,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds the cost block from its `T`, `N`, `R` parts.
    pub fn from_blocks(
        a_mat: DMatrix<f64>,
        b_mat: DMatrix<f64>,
        t: &DMatrix<f64>,
        n: &DMatrix<f64>,
        r: &DMatrix<f64>,
        sigma: DMatrix<f64>,
        gamma: f64,
    ) -> Result<Self, LqrError> {
        let (ns, ni) = (t.nrows(), r.nrows());
        if n.shape() != (ns, ni) {
            return Err(LqrError::ShapeMismatch("N block must be n x m".into()));
        }
        let mut cost = DMatrix::zeros(ns + ni, ns + ni);
        cost.view_mut((0, 0), (ns, ns)).copy_from(t);
        cost.view_mut((0, ns), (ns, ni)).copy_from(n);
        cost.view_mut((ns, 0), (ni, ns)).copy_from(&n.transpose());
        cost.view_mut((ns, ns), (ni, ni)).copy_from(r);
        Self::new(a_mat, b_mat, cost, sigma, gamma)
    }

    pub fn validate(&self) -> Result<(), LqrError> {
        let n = self.a_mat.nrows();
        if self.a_mat.ncols() != n || n == 0 {
            return Err(LqrError::ShapeMismatch("A must be square and nonempty".into()));
        }
        let m = self.b_mat.ncols();
        if self.b_mat.nrows() != n || m == 0 {
            return Err(LqrError::ShapeMismatch("B must be n x m with m >= 1".into()));
        }
        if self.cost_block.shape() != (n + m, n + m) {
            return Err(LqrError::ShapeMismatch("cost block must be (n+m) x (n+m)".into()));
        }
        if self.sigma.shape() != (n, n) {
            return Err(LqrError::ShapeMismatch("sigma must be n x n".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(LqrError::Invalid(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if sup(&(&self.cost_block - self.cost_block.transpose())) > 1e-12 {
            return Err(LqrError::Invalid("cost block is not symmetric".into()));
        }
        if self.r_block().cholesky().is_none() {
            return Err(LqrError::Invalid("R block is not positive definite".into()));
        }
        if sup(&(&self.sigma - self.sigma.transpose())) > 1e-12 {
            return Err(LqrError::Invalid("sigma is not symmetric".into()));
        }
        let eig = symmetrize(&self.sigma).symmetric_eigenvalues();
        if eig.iter().any(|&l| l < -1e-12) {
            return Err(LqrError::Invalid("sigma is not positive semidefinite".into()));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.a_mat.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b_mat.ncols()
    }

    pub fn t_block(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        self.cost_block.view((0, 0), (n, n)).into_owned()
    }

    pub fn n_block(&self) -> DMatrix<f64> {
        let (n, m) = (self.state_dim(), self.input_dim());
        self.cost_block.view((0, n), (n, m)).into_owned()
    }

    pub fn r_block(&self) -> DMatrix<f64> {
        let (n, m) = (self.state_dim(), self.input_dim());
        self.cost_block.view((n, n), (m, m)).into_owned()
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self, LqrError> {
        let mut p = self.clone();
        p.gamma = gamma;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    #[serde(with = "matrix_rows")]
    pub s_mat: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub k_gain: DMatrix<f64>,
    pub v_infinity: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl RiccatiSolution {
    /// `V*(s) = s'Ss + v_inf`.
    pub fn value(&self, s: &DVector<f64>) -> f64 {
        (s.transpose() * &self.s_mat * s)[(0, 0)] + self.v_infinity
    }

    pub fn policy(&self, s: &DVector<f64>) -> DVector<f64> {
        -(&self.k_gain * s)
    }
}

/// Quadratic data of one Riccati equation `S = T + g A'SA - (N + g A'SB) K`,
/// `(R + g B'SB) K = N' + g B'SA`.
struct RiccatiData<'a> {
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    t: &'a DMatrix<f64>,
    n: &'a DMatrix<f64>,
    r: &'a DMatrix<f64>,
    gamma: f64,
}

impl RiccatiData<'_> {
    fn gain(&self, s: &DMatrix<f64>, iteration: usize) -> Result<DMatrix<f64>, LqrError> {
        let g = self.gamma;
        let inner = symmetrize(&(self.r + g * self.b.transpose() * s * self.b));
        let chol = inner
            .cholesky()
            .ok_or(LqrError::IndefiniteInnerBlock(iteration))?;
        let rhs = self.n.transpose() + g * self.b.transpose() * s * self.a;
        Ok(chol.solve(&rhs))
    }

    fn step(&self, s: &DMatrix<f64>, iteration: usize) -> Result<DMatrix<f64>, LqrError> {
        let g = self.gamma;
        let k = self.gain(s, iteration)?;
        let next = self.t + g * self.a.transpose() * s * self.a
            - (self.n + g * self.a.transpose() * s * self.b) * k;
        Ok(symmetrize(&next))
    }

    /// Max of the two equation residuals at `(s, k)`.
    fn residual(&self, s: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
        let g = self.gamma;
        let r1 = self.t + g * self.a.transpose() * s * self.a
            - s
            - (self.n + g * self.a.transpose() * s * self.b) * k;
        let r2 = (self.r + g * self.b.transpose() * s * self.b) * k
            - self.n.transpose()
            - g * self.b.transpose() * s * self.a;
        sup(&r1).max(sup(&r2))
    }

    /// Fixed-point iteration from `s0`, symmetrising every iterate. Stops
    /// when the change is at most `tol * max(1, |S|)`.
    fn solve(
        &self,
        s0: &DMatrix<f64>,
        tol: f64,
        max_iter: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, usize, f64), LqrError> {
        let mut s = symmetrize(s0);
        let mut change = f64::INFINITY;
        for it in 1..=max_iter {
            let next = self.step(&s, it)?;
            change = sup(&(&next - &s));
            s = next;
            if !change.is_finite() {
                break;
            }
            if change <= tol * s.amax().max(1.0) {
                let k = self.gain(&s, it)?;
                let residual = self.residual(&s, &k);
                return Ok((s, k, it, residual));
            }
        }
        Err(LqrError::NonConvergence {
            iterations: max_iter,
            change,
        })
    }
}

/// Discounted Riccati solution; `v_inf = gamma / (1 - gamma) * tr(S sigma)`.
pub fn solve_discounted_riccati(
    p: &LqrProblem,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution, LqrError> {
    p.validate()?;
    let (t, n, r) = (p.t_block(), p.n_block(), p.r_block());
    let data = RiccatiData {
        a: &p.a_mat,
        b: &p.b_mat,
        t: &t,
        n: &n,
        r: &r,
        gamma: p.gamma,
    };
    let (s_mat, k_gain, iterations, residual) = data.solve(&t, tol, max_iter)?;
    let v_infinity = p.gamma / (1.0 - p.gamma) * (&s_mat * &p.sigma).trace();
    Ok(RiccatiSolution {
        s_mat,
        k_gain,
        v_infinity,
        iterations,
        residual,
    })
}

/// Gain of the undiscounted (gain/bias-optimal) LQR policy, taken as the
/// discounted gain at `gamma = 1 - 1e-6`.
pub fn undiscounted_limit_gain(p: &LqrProblem, tol: f64, max_iter: usize) -> Result<DMatrix<f64>, LqrError> {
    let q = p.with_gamma(UNDISCOUNTED_LIMIT_GAMMA)?;
    Ok(solve_discounted_riccati(&q, tol, max_iter)?.k_gain)
}

/// Modified stage cost `L^ = Q* - V*(A^ s + B^ a)` for a deterministic
/// linear model, as the quadratic blocks `T^, N^, R^`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModifiedQuadraticCost {
    #[serde(with = "matrix_rows")]
    pub t_hat: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub n_hat: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub r_hat: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub model_a: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub model_b: DMatrix<f64>,
}

impl ModifiedQuadraticCost {
    /// Max violation of `T^ + A^'SA^ = T + g A'SA`, `N^ + A^'SB^ = N + g A'SB`
    /// and `R^ + B^'SB^ = R + g B'SB` for the given `S`.
    pub fn identity_residual(&self, p: &LqrProblem, s: &DMatrix<f64>) -> f64 {
        let g = p.gamma;
        let (a, b) = (&p.a_mat, &p.b_mat);
        let (ah, bh) = (&self.model_a, &self.model_b);
        let e1 = &self.t_hat + ah.transpose() * s * ah - (p.t_block() + g * a.transpose() * s * a);
        let e2 = &self.n_hat + ah.transpose() * s * bh - (p.n_block() + g * a.transpose() * s * b);
        let e3 = &self.r_hat + bh.transpose() * s * bh - (p.r_block() + g * b.transpose() * s * b);
        sup(&e1).max(sup(&e2)).max(sup(&e3))
    }
}

pub fn build_modified_quadratic_cost(
    sol: &RiccatiSolution,
    p: &LqrProblem,
    model_a: &DMatrix<f64>,
    model_b: &DMatrix<f64>,
) -> Result<ModifiedQuadraticCost, LqrError> {
    if model_a.shape() != p.a_mat.shape() || model_b.shape() != p.b_mat.shape() {
        return Err(LqrError::ShapeMismatch(format!(
            "model is {:?}/{:?}, plant is {:?}/{:?}",
            model_a.shape(),
            model_b.shape(),
            p.a_mat.shape(),
            p.b_mat.shape()
        )));
    }
    if sol.s_mat.shape() != p.a_mat.shape() {
        return Err(LqrError::ShapeMismatch("S does not match the plant".into()));
    }
    let g = p.gamma;
    let s = &sol.s_mat;
    let (a, b) = (&p.a_mat, &p.b_mat);
    let t_hat = symmetrize(&(p.t_block() + g * a.transpose() * s * a - model_a.transpose() * s * model_a));
    let n_hat = p.n_block() + g * a.transpose() * s * b - model_a.transpose() * s * model_b;
    let r_hat = symmetrize(&(p.r_block() + g * b.transpose() * s * b - model_b.transpose() * s * model_b));
    Ok(ModifiedQuadraticCost {
        t_hat,
        n_hat,
        r_hat,
        model_a: model_a.clone(),
        model_b: model_b.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRiccatiSolution {
    #[serde(with = "matrix_rows")]
    pub s_hat: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub k_hat: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Undiscounted Riccati pair for `(A^, B^, T^, N^, R^)`.
///
/// Iterates from `S_0 = T^` first. `T^` is usually indefinite, so that run
/// can leave the region where `R^ + B^'SB^` is positive definite; on failure
/// the iteration restarts from `c I` with growing `c`. Any start above the
/// fixed point stays above it and keeps the inner block definite. Only the
/// stabilising solution (`A^ - B^ K^` Schur) is accepted: the indefinite
/// model cost admits other fixed points whose gains let the model diverge.
pub fn solve_undiscounted_model_riccati(
    mqc: &ModifiedQuadraticCost,
    tol: f64,
    max_iter: usize,
) -> Result<ModelRiccatiSolution, LqrError> {
    let data = RiccatiData {
        a: &mqc.model_a,
        b: &mqc.model_b,
        t: &mqc.t_hat,
        n: &mqc.n_hat,
        r: &mqc.r_hat,
        gamma: 1.0,
    };
    let n = mqc.t_hat.nrows();
    let base = mqc.t_hat.amax().max(mqc.r_hat.amax()).max(1.0);
    let starts = std::iter::once(mqc.t_hat.clone())
        .chain((1..=8).map(|j| DMatrix::identity(n, n) * (base * 10f64.powi(j))));
    let mut used = 0;
    let mut result = Err(LqrError::NonConvergence {
        iterations: 0,
        change: f64::INFINITY,
    });
    for s0 in starts {
        if used >= max_iter {
            break;
        }
        let budget = max_iter - used;
        result = data.solve(&s0, tol, budget);
        used += match &result {
            Ok((_, _, it, _)) | Err(LqrError::IndefiniteInnerBlock(it)) => *it,
            Err(_) => budget,
        };
        if let Ok((_, k, _, _)) = &result {
            let rho = spectral_radius(&(&mqc.model_a - &mqc.model_b * k));
            if rho < 1.0 {
                break;
            }
            result = Err(LqrError::NotStabilizing(rho));
        }
        log::debug!("model Riccati start failed: {:?}", result.as_ref().err());
    }
    let (s_hat, k_hat, _, residual) = result?;
    Ok(ModelRiccatiSolution {
        s_hat,
        k_hat,
        iterations: used,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrEquivalenceReport {
    pub gap_s: f64,
    pub gap_k: f64,
    pub v_infinity: f64,
    /// `max |V*(s) - V^_inf(s) - v_inf|` over the sampled states.
    pub offset_gap: f64,
    /// `max |pi*(s) - pi^_inf(s)| / |s|` over the sampled states.
    pub policy_gap: f64,
    pub identity_residual: f64,
    /// Spectral radius of `A^ - B^ K_gamma`. At or above one the model
    /// trajectories under the optimal policy diverge and no match is expected.
    pub model_closed_loop_radius: f64,
    pub passed: bool,
}

/// Unit vectors and a few fixed mixed unit directions of dimension `n`.
pub fn sample_states(n: usize) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = (0..n)
        .map(|i| DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 }))
        .collect();
    for k in 1..=3 {
        let v = DVector::from_fn(n, |j, _| ((k * (j + 1)) as f64 * 0.7).sin());
        out.push(v.normalize());
    }
    out
}

/// Solves both Riccati equations and compares `S^` with `S`, `K^` with
/// `K_gamma`, and the value offset with `v_inf`.
pub fn verify_lqr_equivalence(
    p: &LqrProblem,
    model_a: &DMatrix<f64>,
    model_b: &DMatrix<f64>,
    tol: f64,
) -> Result<LqrEquivalenceReport, LqrError> {
    let solver_tol = (tol * 1e-6).max(1e-15);
    let sol = solve_discounted_riccati(p, solver_tol, DEFAULT_MAX_ITER)?;
    let mqc = build_modified_quadratic_cost(&sol, p, model_a, model_b)?;
    let model = solve_undiscounted_model_riccati(&mqc, solver_tol, DEFAULT_MAX_ITER)?;
    let gap_s = sup(&(&model.s_hat - &sol.s_mat));
    let gap_k = sup(&(&model.k_hat - &sol.k_gain));
    let mut offset_gap: f64 = 0.0;
    let mut policy_gap: f64 = 0.0;
    for s in sample_states(p.state_dim()) {
        let v_hat_inf = (s.transpose() * &model.s_hat * &s)[(0, 0)];
        offset_gap = offset_gap.max((sol.value(&s) - v_hat_inf - sol.v_infinity).abs());
        let du = sol.policy(&s) + &model.k_hat * &s;
        policy_gap = policy_gap.max(du.amax() / s.norm());
    }
    let identity_residual = mqc.identity_residual(p, &sol.s_mat);
    let model_closed_loop_radius = spectral_radius(&(model_a - model_b * &sol.k_gain));
    Ok(LqrEquivalenceReport {
        gap_s,
        gap_k,
        v_infinity: sol.v_infinity,
        offset_gap,
        policy_gap,
        identity_residual,
        model_closed_loop_radius,
        passed: gap_s <= tol && gap_k <= tol && offset_gap <= tol && policy_gap <= tol,
    })
}
