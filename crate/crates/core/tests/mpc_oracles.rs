use mdpmpc::mpc::{
    policy, q_value, solve_value, theta_gradient, write_trace_csv, AffineConstraint, Dynamics,
    GradientTarget, MpcError, MpcScheme, QuadraticForm, SolveOptions, Storage, ThetaVector,
};
use mdpmpc::random::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Backward Riccati recursion for `z'Hz` stage cost and `s'Gs` terminal
/// cost. Returns `P_0, ..., P_N` and the gains `K_0, ..., K_{N-1}`.
fn riccati_recursion(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    h: &DMatrix<f64>,
    g: &DMatrix<f64>,
    horizon: usize,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let n = a.nrows();
    let m = b.ncols();
    let q = h.view((0, 0), (n, n)).into_owned();
    let sx = h.view((0, n), (n, m)).into_owned();
    let r = h.view((n, n), (m, m)).into_owned();
    let mut p = vec![g.clone()];
    let mut k = Vec::new();
    for _ in 0..horizon {
        let pn = p.last().unwrap();
        let gain = (&r + b.transpose() * pn * b)
            .lu()
            .solve(&(sx.transpose() + b.transpose() * pn * a))
            .unwrap();
        let next = &q + a.transpose() * pn * a - (&sx + a.transpose() * pn * b) * &gain;
        p.push(next);
        k.push(gain);
    }
    p.reverse();
    k.reverse();
    (p, k)
}

struct LqInstance {
    scheme: MpcScheme,
    theta: ThetaVector,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    h: DMatrix<f64>,
    g: DMatrix<f64>,
}

fn random_pd<R: Rng>(dim: usize, g: &mut R) -> DMatrix<f64> {
    let f = DMatrix::from_fn(dim, dim, |_, _| g.random_range(-1.0..1.0));
    &f * f.transpose() + DMatrix::identity(dim, dim) * 0.2
}

fn lq_instance(seed: u64) -> LqInstance {
    let mut g = rng(seed);
    let n = g.random_range(1..=3);
    let m = g.random_range(1..=2);
    let horizon = g.random_range(1..=8);
    let a = DMatrix::from_fn(n, n, |_, _| g.random_range(-1.1..1.1));
    let b = DMatrix::from_fn(n, m, |_, _| g.random_range(-1.0..1.0));
    let h = random_pd(n + m, &mut g);
    let gt = random_pd(n, &mut g);
    let mut ab: Vec<f64> = Vec::new();
    for i in 0..n {
        ab.extend((0..n).map(|j| a[(i, j)]));
    }
    for i in 0..n {
        ab.extend((0..m).map(|j| b[(i, j)]));
    }
    let theta = ThetaVector::new()
        .with("model", &ab)
        .unwrap()
        .with_factor("H", &h)
        .unwrap()
        .with_factor("G", &gt)
        .unwrap();
    let scheme = MpcScheme::new(
        horizon,
        n,
        m,
        Dynamics::LinearTheta { slice: "model".into() },
        QuadraticForm::Factor { slice: "H".into() },
        QuadraticForm::Factor { slice: "G".into() },
    );
    LqInstance {
        scheme,
        theta,
        a,
        b,
        h,
        g: gt,
    }
}

fn random_state<R: Rng>(n: usize, g: &mut R) -> Vec<f64> {
    (0..n).map(|_| g.random_range(-2.0..2.0)).collect()
}

#[test]
fn unconstrained_lq_matches_riccati_oracle() {
    let opts = SolveOptions::default();
    for seed in 0..50 {
        let inst = lq_instance(seed);
        let (p, k) = riccati_recursion(&inst.a, &inst.b, &inst.h, &inst.g, inst.scheme.horizon);
        let mut g = rng(1000 + seed);
        let s = random_state(inst.scheme.state_dim, &mut g);
        let sv = DVector::from_column_slice(&s);
        let sol = solve_value(&inst.scheme, &inst.theta, &s, &opts).unwrap();
        let v_ref = sv.dot(&(&p[0] * &sv));
        assert!((sol.objective - v_ref).abs() <= 1e-8 * v_ref.abs().max(1.0), "seed {seed}");
        let u_ref = -(&k[0] * &sv);
        for j in 0..inst.scheme.input_dim {
            assert!((sol.first_input[j] - u_ref[j]).abs() <= 1e-7, "seed {seed}");
        }
        // One-step-pinned oracle: z'Hz + (As + Ba)' P_1 (As + Ba).
        let a_pin = random_state(inst.scheme.input_dim, &mut g);
        let av = DVector::from_column_slice(&a_pin);
        let z = DVector::from_iterator(s.len() + a_pin.len(), s.iter().chain(&a_pin).copied());
        let next = &inst.a * &sv + &inst.b * &av;
        let q_ref = z.dot(&(&inst.h * &z)) + next.dot(&(&p[1] * &next));
        let q = q_value(&inst.scheme, &inst.theta, &s, &a_pin, &opts).unwrap();
        assert!((q.objective - q_ref).abs() <= 1e-8 * q_ref.abs().max(1.0), "seed {seed}");
    }
}

#[test]
fn single_stage_symmetric_minimum() {
    let scheme = MpcScheme::new(
        1,
        1,
        1,
        Dynamics::Linear {
            a: DMatrix::zeros(1, 1),
            b: DMatrix::identity(1, 1),
        },
        QuadraticForm::Fixed { matrix: DMatrix::identity(2, 2) },
        QuadraticForm::Fixed { matrix: DMatrix::identity(1, 1) },
    )
    .with_input_box(vec![-1.0], vec![1.0]);
    let sol = solve_value(&scheme, &ThetaVector::new(), &[0.0], &SolveOptions::default()).unwrap();
    assert_eq!(sol.first_input, vec![0.0]);
    assert_eq!(sol.objective, 0.0);
}

#[test]
fn box_saturates_policy() {
    // min a^2 + (s + a)^2 at s = -4 has the unconstrained minimiser a = 2.
    let scheme = MpcScheme::new(
        1,
        1,
        1,
        Dynamics::Linear {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
        },
        QuadraticForm::Fixed { matrix: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]) },
        QuadraticForm::Fixed { matrix: DMatrix::identity(1, 1) },
    );
    let th = ThetaVector::new();
    let opts = SolveOptions::default();
    assert!((policy(&scheme, &th, &[-4.0], &opts).unwrap()[0] - 2.0).abs() < 1e-9);
    let boxed = scheme.with_input_box(vec![-1.0], vec![1.0]);
    assert_eq!(policy(&boxed, &th, &[-4.0], &opts).unwrap(), vec![1.0]);
    assert!(matches!(
        q_value(&boxed, &th, &[-4.0], &[1.5], &opts),
        Err(MpcError::InputOutOfBox(_))
    ));
}

#[test]
fn zero_state_gives_zero_policy() {
    let inst = lq_instance(3);
    let s = vec![0.0; inst.scheme.state_dim];
    let u = policy(&inst.scheme, &inst.theta, &s, &SolveOptions::default()).unwrap();
    assert!(u.iter().all(|v| v.abs() < 1e-12));
}

fn stage_cost(h: &DMatrix<f64>, s: &[f64], a: &[f64]) -> f64 {
    let z = DVector::from_iterator(s.len() + a.len(), s.iter().chain(a).copied());
    z.dot(&(h * &z))
}

#[test]
fn violated_path_constraint_pays_exact_penalty() {
    // h(s, a) = s <= 0 with s_0 = 1 fixed: sigma_0 = 1 whatever the inputs.
    let h = DMatrix::identity(2, 2);
    let scheme = MpcScheme::new(
        2,
        1,
        1,
        Dynamics::Linear {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
        },
        QuadraticForm::Fixed { matrix: h.clone() },
        QuadraticForm::Fixed { matrix: DMatrix::identity(1, 1) },
    )
    .with_path_constraint(
        AffineConstraint {
            matrix: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            offset: vec![0.0],
            theta_offset: None,
        },
        100.0,
    );
    let sol = solve_value(&scheme, &ThetaVector::new(), &[1.0], &SolveOptions::default()).unwrap();
    assert_eq!(sol.slacks[0], vec![1.0]);
    let mut expected = 0.0;
    for k in 0..2 {
        expected += stage_cost(&h, &sol.states[k], &sol.inputs[k]) + 100.0 * sol.slacks[k][0];
        assert_eq!(sol.slacks[k][0], sol.states[k][0].max(0.0));
    }
    expected += sol.states[2][0].powi(2);
    assert!((sol.objective - expected).abs() < 1e-12);
    assert!(sol.states[1][0] <= 1e-5);
}

#[test]
fn inactive_soft_constraint_matches_hard_optimum() {
    // Unconstrained optimum a = 2; the path row a <= 0.5 is active.
    let scheme = MpcScheme::new(
        1,
        1,
        1,
        Dynamics::Linear {
            a: DMatrix::identity(1, 1),
            b: DMatrix::identity(1, 1),
        },
        QuadraticForm::Fixed { matrix: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]) },
        QuadraticForm::Fixed { matrix: DMatrix::identity(1, 1) },
    )
    .with_path_constraint(
        AffineConstraint {
            matrix: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            offset: vec![-0.5],
            theta_offset: None,
        },
        1e3,
    );
    let sol = solve_value(&scheme, &ThetaVector::new(), &[-4.0], &SolveOptions::default()).unwrap();
    assert_eq!(sol.max_slack(), 0.0);
    // Hard-constrained optimum on a fine grid of a <= 0.5.
    let hard = (0..=100_000)
        .map(|i| -2.0 + 2.5 * i as f64 / 100_000.0)
        .map(|a: f64| a * a + (a - 4.0) * (a - 4.0))
        .fold(f64::INFINITY, f64::min);
    assert!((sol.objective - hard).abs() < 1e-6, "{} vs {hard}", sol.objective);
}

#[test]
fn min_identity_between_value_and_action_value() {
    let opts = SolveOptions::default();
    for seed in 0..10 {
        let mut inst = lq_instance(200 + seed);
        let m = inst.scheme.input_dim;
        let n = inst.scheme.state_dim;
        inst.scheme = inst
            .scheme
            .with_input_box(vec![-0.5; m], vec![0.5; m])
            .with_path_constraint(
                AffineConstraint::state_box(&vec![-1.5; n], &vec![1.5; n], m),
                1e3,
            );
        let mut g = rng(300 + seed);
        let s = random_state(inst.scheme.state_dim, &mut g);
        let v = solve_value(&inst.scheme, &inst.theta, &s, &opts).unwrap();
        let q_star = q_value(&inst.scheme, &inst.theta, &s, &v.first_input, &opts).unwrap();
        assert!((q_star.objective - v.objective).abs() <= 2e-7, "seed {seed}");
        for _ in 0..100 {
            let a: Vec<f64> = (0..m).map(|_| g.random_range(-0.5..0.5)).collect();
            let q = q_value(&inst.scheme, &inst.theta, &s, &a, &opts).unwrap();
            assert!(q.objective >= v.objective - 2e-7, "seed {seed}");
        }
    }
}

#[test]
fn storage_term_leaves_policy_unchanged() {
    let opts = SolveOptions::default();
    for seed in 0..10 {
        let inst = lq_instance(400 + seed);
        let n = inst.scheme.state_dim;
        let mut g = rng(500 + seed);
        let s = random_state(n, &mut g);
        let base = solve_value(&inst.scheme, &inst.theta, &s, &opts).unwrap();
        let packed: Vec<f64> = (0..n * (n + 1) / 2).map(|_| g.random_range(-3.0..3.0)).collect();
        for storage in [
            Storage::Constant { slice: "lambda".into() },
            Storage::Quadratic { slice: "lambda".into() },
        ] {
            let values = match storage {
                Storage::Constant { .. } => vec![2.5],
                _ => packed.clone(),
            };
            let theta = inst.theta.clone().with("lambda", &values).unwrap();
            let scheme = inst.scheme.clone().with_storage(storage);
            let sol = solve_value(&scheme, &theta, &s, &opts).unwrap();
            assert_eq!(sol.first_input, base.first_input, "seed {seed}");
            assert_eq!(sol.inputs, base.inputs);
            let lam = scheme.storage.value(&theta, &s).unwrap();
            assert_eq!(sol.objective, base.objective - lam);
        }
    }
}

#[test]
fn constant_storage_gradient_is_minus_one() {
    let inst = lq_instance(7);
    let theta = inst.theta.clone().with("lambda", &[0.3]).unwrap();
    let scheme = inst.scheme.clone().with_storage(Storage::Constant { slice: "lambda".into() });
    let s = vec![0.5; scheme.state_dim];
    let grad = theta_gradient(&scheme, &theta, &s, &GradientTarget::Value, 1e-5, &SolveOptions::default())
        .unwrap();
    let idx = theta.slice_info("lambda").unwrap().start;
    assert!((grad.values[idx] + 1.0).abs() < 1e-9);
    assert!(grad.usable.iter().all(|&u| u));
}

#[test]
fn cost_scale_gradient_is_positive() {
    let inst = lq_instance(9);
    let n = inst.scheme.state_dim;
    let m = inst.scheme.input_dim;
    let mut scheme = inst.scheme.clone();
    scheme.stage_cost = QuadraticForm::Scaled {
        matrix: inst.h.clone(),
        slice: "scale".into(),
    };
    let theta = inst.theta.clone().with("scale", &[1.3]).unwrap();
    let s = vec![0.7; n];
    let opts = SolveOptions::default();
    let grad = theta_gradient(&scheme, &theta, &s, &GradientTarget::Value, 1e-5, &opts).unwrap();
    let idx = theta.slice_info("scale").unwrap().start;
    assert!(grad.values[idx] > 0.0);
    let a = vec![0.1; m];
    let gq = theta_gradient(
        &scheme,
        &theta,
        &s,
        &GradientTarget::QValue { action: a },
        1e-5,
        &opts,
    )
    .unwrap();
    assert!(gq.values[idx] > 0.0);
}

#[test]
fn theta_gradient_step_halving_agrees_with_richardson() {
    let opts = SolveOptions::default();
    for seed in 0..5 {
        let inst = lq_instance(600 + seed);
        let mut scheme = inst.scheme.clone();
        let m = scheme.input_dim;
        scheme = scheme
            .with_input_box(vec![-3.0; m], vec![3.0; m])
            .with_storage(Storage::Linear { slice: "lin".into() });
        let n = scheme.state_dim;
        let theta = inst.theta.clone().with("lin", &vec![0.4; n]).unwrap();
        let s = vec![0.6; n];
        let h = 1e-3;
        let g1 = theta_gradient(&scheme, &theta, &s, &GradientTarget::Value, h, &opts).unwrap();
        let g2 = theta_gradient(&scheme, &theta, &s, &GradientTarget::Value, h / 2.0, &opts).unwrap();
        for i in 0..theta.len() {
            let reference = (4.0 * g2.values[i] - g1.values[i]) / 3.0;
            let scale = reference.abs().max(1.0);
            assert!((g1.values[i] - reference).abs() <= 1e-4 * scale, "seed {seed} entry {i}");
            assert!((g2.values[i] - reference).abs() <= 1e-4 * scale, "seed {seed} entry {i}");
        }
    }
}

#[test]
fn solves_are_deterministic_and_serialisable() {
    let inst = lq_instance(21);
    let s = vec![1.0; inst.scheme.state_dim];
    let opts = SolveOptions {
        seed: 5,
        ..SolveOptions::default()
    };
    let a = solve_value(&inst.scheme, &inst.theta, &s, &opts).unwrap();
    let b = solve_value(&inst.scheme, &inst.theta, &s, &opts).unwrap();
    assert_eq!(a, b);
    let json = serde_json::to_string(&inst.scheme).unwrap();
    let back: MpcScheme = serde_json::from_str(&json).unwrap();
    let c = solve_value(&back, &inst.theta, &s, &opts).unwrap();
    assert_eq!(a.objective, c.objective);
    let mut buf = Vec::new();
    write_trace_csv(&a, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("iteration,objective,residual\n"));
    assert!(text.lines().count() >= 2);
}

#[test]
fn pendulum_linearisation_matrices() {
    let model = Dynamics::LinearizedPendulum {
        g: 9.81,
        mass: 0.5,
        dt: 0.1,
        slice: "l".into(),
    };
    let theta = ThetaVector::new().with("l", &[0.25]).unwrap();
    let (a, b) = model.matrices(&theta, 2, 1).unwrap();
    assert!((a[(1, 0)] - 9.81 / 0.25 * 0.1).abs() < 1e-15);
    assert_eq!(a[(0, 1)], 0.1);
    assert!((b[(1, 0)] - 0.1 / (0.5 * 0.0625)).abs() < 1e-15);
    let bad = ThetaVector::new().with("l", &[-0.1]).unwrap();
    assert!(model.matrices(&bad, 2, 1).is_err());
}
