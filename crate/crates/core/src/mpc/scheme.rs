use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::theta::{factor_to_matrix, packed_len, packed_symmetric, SliceKind, ThetaVector};
use super::MpcError;
use crate::lqr::matrix_rows;

/// Deterministic model `s+ = f_theta(s, a)`. Every variant is linear in
/// `(s, a)` once theta is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dynamics {
    Linear {
        #[serde(with = "matrix_rows")]
        a: DMatrix<f64>,
        #[serde(with = "matrix_rows")]
        b: DMatrix<f64>,
    },
    /// `A` then `B`, both row-major, read from one theta slice.
    LinearTheta { slice: String },
    /// Pendulum linearised at the upright position with length `theta_l`:
    /// `s+ = s + [s2, g/l * s1] dt + [0, dt/(m l^2)] a`.
    LinearizedPendulum {
        g: f64,
        mass: f64,
        dt: f64,
        slice: String,
    },
}

impl Dynamics {
    pub fn matrices(
        &self,
        theta: &ThetaVector,
        n: usize,
        m: usize,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), MpcError> {
        let (a, b) = match self {
            Dynamics::Linear { a, b } => (a.clone(), b.clone()),
            Dynamics::LinearTheta { slice } => {
                let v = theta.slice(slice)?;
                if v.len() != n * n + n * m {
                    return Err(MpcError::Theta(format!(
                        "'{slice}' needs {} entries for A and B",
                        n * n + n * m
                    )));
                }
                (
                    DMatrix::from_row_slice(n, n, &v[..n * n]),
                    DMatrix::from_row_slice(n, m, &v[n * n..]),
                )
            }
            Dynamics::LinearizedPendulum { g, mass, dt, slice } => {
                if n != 2 || m != 1 {
                    return Err(MpcError::InvalidScheme(
                        "linearised pendulum needs state_dim 2 and input_dim 1".into(),
                    ));
                }
                let l = single(theta, slice)?;
                if l <= 0.0 {
                    return Err(MpcError::Theta(format!("pendulum length {l} must be positive")));
                }
                (
                    DMatrix::from_row_slice(2, 2, &[1.0, *dt, g / l * dt, 1.0]),
                    DMatrix::from_row_slice(2, 1, &[0.0, dt / (mass * l * l)]),
                )
            }
        };
        if a.shape() != (n, n) || b.shape() != (n, m) {
            return Err(MpcError::InvalidScheme(format!(
                "model matrices are {:?} and {:?}, expected ({n}, {n}) and ({n}, {m})",
                a.shape(),
                b.shape()
            )));
        }
        Ok((a, b))
    }
}

fn single(theta: &ThetaVector, slice: &str) -> Result<f64, MpcError> {
    match theta.slice(slice)? {
        [x] => Ok(*x),
        v => Err(MpcError::Theta(format!("'{slice}' must hold 1 entry, has {}", v.len()))),
    }
}

/// Quadratic form `z' M z` used for stage (`z = [s; a]`) and terminal
/// (`z = s`) costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum QuadraticForm {
    Zero,
    Fixed {
        #[serde(with = "matrix_rows")]
        matrix: DMatrix<f64>,
    },
    /// `M = F F'` with `F` a theta factor slice.
    Factor { slice: String },
    /// `M = theta_0 * matrix`.
    Scaled {
        #[serde(with = "matrix_rows")]
        matrix: DMatrix<f64>,
        slice: String,
    },
}

impl QuadraticForm {
    pub fn matrix(&self, theta: &ThetaVector, dim: usize) -> Result<DMatrix<f64>, MpcError> {
        let m = match self {
            QuadraticForm::Zero => DMatrix::zeros(dim, dim),
            QuadraticForm::Fixed { matrix } => matrix.clone(),
            QuadraticForm::Factor { slice } => {
                let info = theta
                    .slice_info(slice)
                    .ok_or_else(|| MpcError::Theta(format!("no slice '{slice}'")))?;
                if info.kind != (SliceKind::Factor { dim }) {
                    return Err(MpcError::Theta(format!("'{slice}' is not a {dim}x{dim} factor")));
                }
                factor_to_matrix(theta.slice(slice)?, dim)
            }
            QuadraticForm::Scaled { matrix, slice } => matrix * single(theta, slice)?,
        };
        if m.shape() != (dim, dim) {
            return Err(MpcError::InvalidScheme(format!(
                "cost matrix is {:?}, expected ({dim}, {dim})",
                m.shape()
            )));
        }
        Ok((&m + m.transpose()) * 0.5)
    }
}

/// Storage term `lambda_theta(s)`, subtracted at the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Storage {
    Zero,
    Constant { slice: String },
    Linear { slice: String },
    /// `s' P s` with `P` symmetric, packed lower triangle in the slice.
    Quadratic { slice: String },
}

impl Storage {
    pub fn value(&self, theta: &ThetaVector, s: &[f64]) -> Result<f64, MpcError> {
        let n = s.len();
        match self {
            Storage::Zero => Ok(0.0),
            Storage::Constant { slice } => single(theta, slice),
            Storage::Linear { slice } => {
                let v = theta.slice(slice)?;
                if v.len() != n {
                    return Err(MpcError::Theta(format!("'{slice}' must hold {n} entries")));
                }
                Ok(v.iter().zip(s).map(|(a, b)| a * b).sum())
            }
            Storage::Quadratic { slice } => {
                let v = theta.slice(slice)?;
                if v.len() != packed_len(n) {
                    return Err(MpcError::Theta(format!(
                        "'{slice}' must hold {} entries",
                        packed_len(n)
                    )));
                }
                let p = packed_symmetric(v, n);
                let sv = DVector::from_column_slice(s);
                Ok(sv.dot(&(&p * &sv)))
            }
        }
    }
}

/// `h(z) = matrix z + offset (+ theta slice)`, satisfied when `<= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConstraint {
    #[serde(with = "matrix_rows")]
    pub matrix: DMatrix<f64>,
    pub offset: Vec<f64>,
    #[serde(default)]
    pub theta_offset: Option<String>,
}

impl AffineConstraint {
    pub fn empty(cols: usize) -> Self {
        AffineConstraint {
            matrix: DMatrix::zeros(0, cols),
            offset: Vec::new(),
            theta_offset: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    /// `lower <= s <= upper` as path rows over `z = [s; a]` (`input_dim`
    /// trailing zero columns). Infinite bounds are skipped.
    pub fn state_box(lower: &[f64], upper: &[f64], input_dim: usize) -> Self {
        let n = lower.len();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for i in 0..n {
            if upper[i].is_finite() {
                let mut r = vec![0.0; n + input_dim];
                r[i] = 1.0;
                rows.push((r, -upper[i]));
            }
            if lower[i].is_finite() {
                let mut r = vec![0.0; n + input_dim];
                r[i] = -1.0;
                rows.push((r, lower[i]));
            }
        }
        AffineConstraint {
            matrix: DMatrix::from_fn(rows.len(), n + input_dim, |i, j| rows[i].0[j]),
            offset: rows.iter().map(|r| r.1).collect(),
            theta_offset: None,
        }
    }

    fn offsets(&self, theta: &ThetaVector) -> Result<Vec<f64>, MpcError> {
        let mut off = self.offset.clone();
        if let Some(name) = &self.theta_offset {
            let v = theta.slice(name)?;
            if v.len() != off.len() {
                return Err(MpcError::Theta(format!("'{name}' must hold {} entries", off.len())));
            }
            for (o, t) in off.iter_mut().zip(v) {
                *o += t;
            }
        }
        Ok(off)
    }
}

pub const DEFAULT_SLACK_WEIGHT: f64 = 1e3;

/// Soft-constrained single-shooting MPC scheme on a deterministic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcScheme {
    pub horizon: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub model: Dynamics,
    pub stage_cost: QuadraticForm,
    pub terminal_cost: QuadraticForm,
    pub storage: Storage,
    pub path_constraint: AffineConstraint,
    pub terminal_constraint: AffineConstraint,
    #[serde(with = "crate::ext::signed_ext_vec")]
    pub input_lower: Vec<f64>,
    #[serde(with = "crate::ext::signed_ext_vec")]
    pub input_upper: Vec<f64>,
    pub slack_weight: Vec<f64>,
    pub terminal_slack_weight: Vec<f64>,
}

impl MpcScheme {
    /// Unconstrained scheme with the given model and costs.
    pub fn new(
        horizon: usize,
        state_dim: usize,
        input_dim: usize,
        model: Dynamics,
        stage_cost: QuadraticForm,
        terminal_cost: QuadraticForm,
    ) -> Self {
        MpcScheme {
            horizon,
            state_dim,
            input_dim,
            model,
            stage_cost,
            terminal_cost,
            storage: Storage::Zero,
            path_constraint: AffineConstraint::empty(state_dim + input_dim),
            terminal_constraint: AffineConstraint::empty(state_dim),
            input_lower: vec![f64::NEG_INFINITY; input_dim],
            input_upper: vec![f64::INFINITY; input_dim],
            slack_weight: Vec::new(),
            terminal_slack_weight: Vec::new(),
        }
    }

    pub fn with_input_box(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.input_lower = lower;
        self.input_upper = upper;
        self
    }

    pub fn with_storage(mut self, storage: Storage) -> Self {
        self.storage = storage;
        self
    }

    /// Path constraint with slack weight `weight` on every row.
    pub fn with_path_constraint(mut self, c: AffineConstraint, weight: f64) -> Self {
        self.slack_weight = vec![weight; c.rows()];
        self.path_constraint = c;
        self
    }

    pub fn with_terminal_constraint(mut self, c: AffineConstraint, weight: f64) -> Self {
        self.terminal_slack_weight = vec![weight; c.rows()];
        self.terminal_constraint = c;
        self
    }

    pub fn has_constraints(&self) -> bool {
        self.path_constraint.rows() + self.terminal_constraint.rows() > 0
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        let (n, m) = (self.state_dim, self.input_dim);
        let bad = |msg: String| Err(MpcError::InvalidScheme(msg));
        if self.horizon == 0 || n == 0 || m == 0 {
            return bad("horizon, state_dim and input_dim must be positive".into());
        }
        if self.input_lower.len() != m || self.input_upper.len() != m {
            return bad("input box must have input_dim entries".into());
        }
        if self
            .input_lower
            .iter()
            .zip(&self.input_upper)
            .any(|(l, u)| !(l <= u) || l.is_nan())
        {
            return Err(MpcError::InfeasibleBox);
        }
        let pc = &self.path_constraint;
        if (pc.rows() > 0 && pc.matrix.ncols() != n + m) || pc.offset.len() != pc.rows() {
            return bad("path constraint must be rows x (n + m) with matching offset".into());
        }
        let tc = &self.terminal_constraint;
        if (tc.rows() > 0 && tc.matrix.ncols() != n) || tc.offset.len() != tc.rows() {
            return bad("terminal constraint must be rows x n with matching offset".into());
        }
        if self.slack_weight.len() != pc.rows() || self.terminal_slack_weight.len() != tc.rows() {
            return bad("one slack weight per constraint row".into());
        }
        if self
            .slack_weight
            .iter()
            .chain(&self.terminal_slack_weight)
            .any(|w| !(*w > 0.0) || !w.is_finite())
        {
            return bad("slack weights must be positive and finite".into());
        }
        Ok(())
    }

    pub(crate) fn compile(&self, theta: &ThetaVector) -> Result<Compiled, MpcError> {
        self.validate()?;
        theta.validate()?;
        let (n, m) = (self.state_dim, self.input_dim);
        let (a, b) = self.model.matrices(theta, n, m)?;
        let h = self.stage_cost.matrix(theta, n + m)?;
        let g = self.terminal_cost.matrix(theta, n)?;
        let flat = |x: &DMatrix<f64>| -> Vec<f64> {
            (0..x.nrows())
                .flat_map(|i| (0..x.ncols()).map(move |j| x[(i, j)]))
                .collect()
        };
        Ok(Compiled {
            n,
            m,
            horizon: self.horizon,
            a: flat(&a),
            b: flat(&b),
            h: flat(&h),
            g: flat(&g),
            path_rows: self.path_constraint.rows(),
            path_c: flat(&self.path_constraint.matrix),
            path_d: self.path_constraint.offsets(theta)?,
            term_rows: self.terminal_constraint.rows(),
            term_c: flat(&self.terminal_constraint.matrix),
            term_d: self.terminal_constraint.offsets(theta)?,
            mu: self.slack_weight.clone(),
            mu_f: self.terminal_slack_weight.clone(),
        })
    }
}

/// Penalty `max(h, 0)`, a softplus of sharpness `beta` when smoothing, or
/// nothing (`Omit`) for the smooth part alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Penalty {
    Exact,
    Softplus(f64),
    Omit,
}

impl Penalty {
    fn value_and_slope(self, h: f64) -> (f64, f64) {
        match self {
            Penalty::Exact => {
                if h > 0.0 {
                    (h, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Penalty::Softplus(beta) => {
                let t = beta * h;
                let value = if t > 0.0 {
                    h + (-t).exp().ln_1p() / beta
                } else {
                    t.exp().ln_1p() / beta
                };
                let slope = if t >= 0.0 {
                    1.0 / (1.0 + (-t).exp())
                } else {
                    let e = t.exp();
                    e / (1.0 + e)
                };
                (value, slope)
            }
            Penalty::Omit => (0.0, 0.0),
        }
    }
}

/// Second-order data of the program in the stacked inputs: the cost
/// without penalties has Hessian `hessian`, and the constraint rows (path
/// rows stage by stage, then terminal rows) are `jacobian * u + offset`.
#[derive(Debug, Clone)]
pub(crate) struct Linearisation {
    pub hessian: DMatrix<f64>,
    pub jacobian: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub weights: Vec<f64>,
}

/// Theta-resolved scheme as flat row-major arrays.
#[derive(Debug, Clone)]
pub(crate) struct Compiled {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
    path_rows: usize,
    path_c: Vec<f64>,
    path_d: Vec<f64>,
    term_rows: usize,
    term_c: Vec<f64>,
    term_d: Vec<f64>,
    mu: Vec<f64>,
    mu_f: Vec<f64>,
}

/// Forward rollout results kept for the adjoint pass and for reporting.
pub(crate) struct Rollout {
    pub states: Vec<f64>,
    pub slacks: Vec<f64>,
    pub terminal_slacks: Vec<f64>,
}

impl Compiled {
    pub fn has_constraints(&self) -> bool {
        self.path_rows + self.term_rows > 0
    }

    /// Exact, since the model is linear and the costs quadratic.
    pub fn linearise(&self, s0: &[f64]) -> Linearisation {
        let (n, m, nz, horizon) = (self.n, self.m, self.n + self.m, self.horizon);
        let dim = horizon * m;
        let a = DMatrix::from_row_slice(n, n, &self.a);
        let b = DMatrix::from_row_slice(n, m, &self.b);
        let h = DMatrix::from_row_slice(nz, nz, &self.h);
        let g = DMatrix::from_row_slice(n, n, &self.g);
        let pc = DMatrix::from_row_slice(self.path_rows, nz, &self.path_c);
        let tc = DMatrix::from_row_slice(self.term_rows, n, &self.term_c);
        let rows = horizon * self.path_rows + self.term_rows;
        let mut hessian = DMatrix::zeros(dim, dim);
        let mut jacobian = DMatrix::zeros(rows, dim);
        let mut offset = DVector::zeros(rows);
        let mut weights = Vec::with_capacity(rows);
        // Sensitivity of s_k to u and the free response from s0.
        let mut sens = DMatrix::zeros(n, dim);
        let mut free = DVector::from_column_slice(s0);
        for k in 0..horizon {
            let mut z = DMatrix::zeros(nz, dim);
            z.rows_mut(0, n).copy_from(&sens);
            for j in 0..m {
                z[(n + j, k * m + j)] = 1.0;
            }
            hessian += z.transpose() * &h * &z * 2.0;
            if self.path_rows > 0 {
                let mut z0 = DVector::zeros(nz);
                z0.rows_mut(0, n).copy_from(&free);
                let r0 = k * self.path_rows;
                jacobian.rows_mut(r0, self.path_rows).copy_from(&(&pc * &z));
                let base = &pc * z0;
                for r in 0..self.path_rows {
                    offset[r0 + r] = base[r] + self.path_d[r];
                }
                weights.extend_from_slice(&self.mu);
            }
            sens = &a * &sens + &b * z.rows(n, m);
            free = &a * free;
        }
        hessian += sens.transpose() * &g * &sens * 2.0;
        if self.term_rows > 0 {
            let r0 = horizon * self.path_rows;
            jacobian.rows_mut(r0, self.term_rows).copy_from(&(&tc * &sens));
            let base = &tc * &free;
            for r in 0..self.term_rows {
                offset[r0 + r] = base[r] + self.term_d[r];
            }
            weights.extend_from_slice(&self.mu_f);
        }
        hessian = (&hessian + hessian.transpose()) * 0.5;
        Linearisation {
            hessian,
            jacobian,
            offset,
            weights,
        }
    }

    /// States `s_0..s_N` (flat) for the stacked inputs `u`.
    pub fn simulate(&self, s0: &[f64], u: &[f64]) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let mut states = vec![0.0; (self.horizon + 1) * n];
        states[..n].copy_from_slice(s0);
        for k in 0..self.horizon {
            let (cur, next) = states.split_at_mut((k + 1) * n);
            let s = &cur[k * n..];
            let a = &u[k * m..(k + 1) * m];
            for i in 0..n {
                let mut v = 0.0;
                for j in 0..n {
                    v += self.a[i * n + j] * s[j];
                }
                for j in 0..m {
                    v += self.b[i * m + j] * a[j];
                }
                next[i] = v;
            }
        }
        states
    }

    /// Cost of the stacked inputs `u` from `s0`, without the storage term.
    /// Writes `d cost / d u` into `grad` when given.
    pub fn evaluate(
        &self,
        s0: &[f64],
        u: &[f64],
        penalty: Penalty,
        grad: Option<&mut [f64]>,
    ) -> (f64, Rollout) {
        let (n, m, nz) = (self.n, self.m, self.n + self.m);
        let states = self.simulate(s0, u);
        let mut cost = 0.0;
        let mut slacks = vec![0.0; self.horizon * self.path_rows];
        let mut slopes = vec![0.0; self.horizon * self.path_rows];
        let mut z = vec![0.0; nz];
        let mut hz = vec![0.0; self.horizon * nz];
        for k in 0..self.horizon {
            z[..n].copy_from_slice(&states[k * n..(k + 1) * n]);
            z[n..].copy_from_slice(&u[k * m..(k + 1) * m]);
            for i in 0..nz {
                let mut v = 0.0;
                for j in 0..nz {
                    v += self.h[i * nz + j] * z[j];
                }
                hz[k * nz + i] = v;
                cost += z[i] * v;
            }
            for r in 0..self.path_rows {
                let mut hv = self.path_d[r];
                for j in 0..nz {
                    hv += self.path_c[r * nz + j] * z[j];
                }
                slacks[k * self.path_rows + r] = hv.max(0.0);
                let (p, dp) = penalty.value_and_slope(hv);
                slopes[k * self.path_rows + r] = dp;
                cost += self.mu[r] * p;
            }
        }
        let s_n = &states[self.horizon * n..];
        let mut gs = vec![0.0; n];
        for i in 0..n {
            let mut v = 0.0;
            for j in 0..n {
                v += self.g[i * n + j] * s_n[j];
            }
            gs[i] = v;
            cost += s_n[i] * v;
        }
        let mut terminal_slacks = vec![0.0; self.term_rows];
        let mut term_slopes = vec![0.0; self.term_rows];
        for r in 0..self.term_rows {
            let mut hv = self.term_d[r];
            for j in 0..n {
                hv += self.term_c[r * n + j] * s_n[j];
            }
            terminal_slacks[r] = hv.max(0.0);
            let (p, dp) = penalty.value_and_slope(hv);
            term_slopes[r] = dp;
            cost += self.mu_f[r] * p;
        }

        if let Some(grad) = grad {
            // Adjoint: lam_N = dT/ds_N, lam_k = dL_k/ds + A' lam_{k+1}.
            let mut lam: Vec<f64> = gs.iter().map(|v| 2.0 * v).collect();
            for r in 0..self.term_rows {
                let w = self.mu_f[r] * term_slopes[r];
                if w != 0.0 {
                    for j in 0..n {
                        lam[j] += w * self.term_c[r * n + j];
                    }
                }
            }
            let mut dz = vec![0.0; nz];
            let mut prev = vec![0.0; n];
            for k in (0..self.horizon).rev() {
                for i in 0..nz {
                    dz[i] = 2.0 * hz[k * nz + i];
                }
                for r in 0..self.path_rows {
                    let w = self.mu[r] * slopes[k * self.path_rows + r];
                    if w != 0.0 {
                        for j in 0..nz {
                            dz[j] += w * self.path_c[r * nz + j];
                        }
                    }
                }
                for j in 0..m {
                    let mut v = dz[n + j];
                    for i in 0..n {
                        v += self.b[i * m + j] * lam[i];
                    }
                    grad[k * m + j] = v;
                }
                for j in 0..n {
                    let mut v = dz[j];
                    for i in 0..n {
                        v += self.a[i * n + j] * lam[i];
                    }
                    prev[j] = v;
                }
                lam.copy_from_slice(&prev);
            }
        }
        (
            cost,
            Rollout {
                states,
                slacks,
                terminal_slacks,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::central_difference;
    use crate::random::rng;
    use rand::Rng;

    fn constrained_scheme() -> (MpcScheme, ThetaVector) {
        let mut r = rng(11);
        let mut m = |rows, cols| DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0));
        let scheme = MpcScheme::new(
            4,
            2,
            1,
            Dynamics::Linear { a: m(2, 2), b: m(2, 1) },
            QuadraticForm::Factor { slice: "H".into() },
            QuadraticForm::Fixed { matrix: DMatrix::identity(2, 2) },
        )
        .with_path_constraint(AffineConstraint::state_box(&[-0.3, -0.3], &[0.3, 0.3], 1), 50.0)
        .with_terminal_constraint(
            AffineConstraint {
                matrix: m(1, 2),
                offset: vec![-0.1],
                theta_offset: None,
            },
            20.0,
        );
        let h = m(3, 3);
        let theta = ThetaVector::new()
            .with_factor("H", &(&h * h.transpose() + DMatrix::identity(3, 3)))
            .unwrap();
        (scheme, theta)
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let (scheme, theta) = constrained_scheme();
        let c = scheme.compile(&theta).unwrap();
        let s0 = [0.8, -0.5];
        let u = [0.3, -0.7, 0.2, 0.9];
        for penalty in [Penalty::Softplus(30.0), Penalty::Exact] {
            let mut g = vec![0.0; 4];
            c.evaluate(&s0, &u, penalty, Some(&mut g));
            let mut fd = vec![0.0; 4];
            let mut f = |x: &[f64]| c.evaluate(&s0, x, penalty, None).0;
            central_difference(&mut f, &u, 1e-6, None, &mut fd);
            for i in 0..4 {
                assert!((g[i] - fd[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "{penalty:?} {g:?} {fd:?}");
            }
        }
    }

    #[test]
    fn linearisation_matches_the_cost() {
        let (scheme, theta) = constrained_scheme();
        let c = scheme.compile(&theta).unwrap();
        let s0 = [0.8, -0.5];
        let lin = c.linearise(&s0);
        let u = DVector::from_column_slice(&[0.3, -0.7, 0.2, 0.9]);
        let du = DVector::from_column_slice(&[0.1, 0.2, -0.3, 0.05]);
        let f = |x: &DVector<f64>| c.evaluate(&s0, x.as_slice(), Penalty::Omit, None).0;
        // A quadratic: the second difference is exactly du' H du.
        let second = f(&(&u + &du)) - 2.0 * f(&u) + f(&(&u - &du));
        assert!((second - du.dot(&(&lin.hessian * &du))).abs() < 1e-12);
        let (_, roll) = c.evaluate(&s0, u.as_slice(), Penalty::Exact, None);
        let h = &lin.jacobian * &u + &lin.offset;
        let slacks: Vec<f64> = roll.slacks.iter().chain(&roll.terminal_slacks).copied().collect();
        assert_eq!(slacks.len(), h.len());
        for (s, h) in slacks.iter().zip(h.iter()) {
            assert!((s - h.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_is_close_to_the_kink() {
        let p = Penalty::Softplus(1e6);
        assert!((p.value_and_slope(0.01).0 - 0.01).abs() < 1e-12);
        assert!(p.value_and_slope(-0.01).0 < 1e-300);
        assert!((p.value_and_slope(0.0).1 - 0.5).abs() < 1e-15);
        assert_eq!(Penalty::Exact.value_and_slope(-1.0), (0.0, 0.0));
    }

    #[test]
    fn state_box_rows() {
        let c = AffineConstraint::state_box(&[-1.0, f64::NEG_INFINITY], &[2.0, 3.0], 1);
        assert_eq!(c.rows(), 3);
        assert_eq!(c.offset, vec![-2.0, -1.0, -3.0]);
        assert_eq!(c.matrix.ncols(), 3);
    }
}
