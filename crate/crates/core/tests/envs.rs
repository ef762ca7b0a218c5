use mdpmpc::envs::investment::log_grid;
use mdpmpc::envs::pendulum::pendulum_theta;
use mdpmpc::envs::*;
use mdpmpc::random::rng;

fn base_investment() -> InvestmentProblem {
    InvestmentProblem {
        a_const: 5.0,
        alpha: 0.34,
        gamma: 0.9,
        model_mu: 0.8,
    }
}

/// Golden-section minimum of a unimodal `f` on `[lo, hi]`.
fn golden(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    while b - a > 1e-13 * (1.0 + b.abs()) {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

#[test]
fn investment_constants() {
    let p = base_investment();
    assert!((p.c_coef() - (-0.489913)).abs() < 1e-6, "{}", p.c_coef());
    let (v1, pi1) = investment_closed_form(&p, 1.0).unwrap();
    assert!((v1 - (-14.3166)).abs() < 1e-4, "{v1}");
    assert!((pi1 - 1.53).abs() < 1e-12);
    assert_eq!(pi1, p.gamma * p.alpha * p.a_const);
    assert!(investment_closed_form(&p, 0.0).is_err());
    assert!(investment_closed_form(&p, -1.0).is_err());
}

#[test]
fn closed_form_satisfies_the_bellman_equation() {
    // Oracle: minimise -ln(A s^alpha - a) + gamma V(a) over a directly.
    for gamma in [0.5, 0.9, 0.99] {
        let p = InvestmentProblem { gamma, ..base_investment() };
        for s in [0.2, 0.7, 1.0, 3.0, 10.0] {
            let (v, pi) = investment_closed_form(&p, s).unwrap();
            let y = p.a_const * f64::powf(s, p.alpha);
            let q = |a: f64| -(y - a).ln() + gamma * investment_closed_form(&p, a).unwrap().0;
            let (a_min, q_min) = golden(q, 1e-9 * y, y * (1.0 - 1e-12));
            assert!((q_min - v).abs() < 1e-9 * (1.0 + v.abs()), "gamma={gamma} s={s}");
            assert!((a_min - pi).abs() < 1e-5 * (1.0 + pi), "gamma={gamma} s={s}");
        }
    }
}

fn sup_gaps(p: &InvestmentProblem, horizon: usize) -> (f64, f64) {
    let mut gv: f64 = 0.0;
    let mut gp: f64 = 0.0;
    for s in log_grid(0.2, 10.0, 200) {
        let (v, pi) = investment_closed_form(p, s).unwrap();
        let m = investment_mpc_value(p, horizon, s, 1e-10).unwrap();
        gv = gv.max((m.value - v).abs());
        gp = gp.max((m.first_input - pi).abs());
    }
    (gv, gp)
}

#[test]
fn investment_mpc_matches_closed_form() {
    let base = base_investment();
    let cases = [
        (base, 10),
        (InvestmentProblem { gamma: 0.5, ..base }, 10),
        (InvestmentProblem { model_mu: 1.2, ..base }, 10),
        (InvestmentProblem { model_mu: 1.0, ..base }, 10),
        (base, 1),
        (InvestmentProblem { gamma: 0.99, model_mu: 0.5, ..base }, 25),
    ];
    for (p, n) in cases {
        let (gv, gp) = sup_gaps(&p, n);
        assert!(gv <= 1e-4 && gp <= 1e-4, "{p:?} N={n}: {gv:e} {gp:e}");
        assert!(gv <= 1e-8 && gp <= 1e-8, "tighter than required: {p:?} N={n}: {gv:e} {gp:e}");
    }
}

#[test]
fn investment_grid_is_log_spaced() {
    let g = log_grid(0.2, 10.0, 200);
    assert_eq!(g.len(), 200);
    assert!((g[0] - 0.2).abs() < 1e-15 && (g[199] - 10.0).abs() < 1e-12);
    let ratio = g[1] / g[0];
    assert!(g.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-12));
}

#[test]
fn pendulum_step_formulas() {
    let env = PendulumEnv::default();
    let mut r = rng(5);
    let (next, cost) = env.step(&[0.0, 0.0], &[0.0], &mut r).unwrap();
    assert_eq!(next, vec![0.0, 0.0]);
    assert_eq!(cost, 0.0);
    let next = env.transition(&[0.1, 0.0], 0.0, 0.0);
    assert_eq!(next[0], 0.1);
    assert!((next[1] - 9.81 / 0.3 * 0.1f64.sin() * 0.1).abs() < 1e-15);
    let (_, cost) = env.step(&[0.3, -0.2], &[0.5], &mut r).unwrap();
    assert!((cost - (0.09 + 0.04 + 0.25)).abs() < 1e-15);
    // Inputs outside the box are clipped.
    let a = env.transition(&[0.2, 0.1], 0.8, 0.1);
    let mut r1 = rng(9);
    let mut r2 = rng(9);
    let (n1, _) = env.step(&[0.2, 0.1], &[3.0], &mut r1).unwrap();
    let (n2, _) = env.step(&[0.2, 0.1], &[0.8], &mut r2).unwrap();
    assert_eq!(n1, n2);
    assert_eq!(n1[0], a[0]);
}

#[test]
fn pendulum_successor_moments() {
    let env = PendulumEnv::default();
    let mut r = rng(2024);
    let n = 100_000;
    let s = [0.5, 0.0];
    let draws: Vec<f64> = (0..n).map(|_| env.step(&s, &[0.0], &mut r).unwrap().0[1]).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let analytic_mean = 9.81 / 0.3 * 0.5f64.sin() * 0.1;
    // xi ~ U[-1/2, 1/2] has variance 1/12.
    let sd = 0.5f64.sin() * 0.1 / 12f64.sqrt();
    assert!((mean - analytic_mean).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} {analytic_mean}");
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var.sqrt() / sd - 1.0).abs() < 0.02);
}

#[test]
fn pendulum_dp_baseline() {
    let env = PendulumEnv::default();
    let coarse = pendulum_dp(&env, &GridSpec::default()).unwrap();
    assert!(coarse.residual <= 1e-6);
    // Origin is the cost-free equilibrium.
    let origin = coarse.value_at(&[0.0, 0.0]);
    let v_min = coarse.v_grid.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(origin, v_min);
    assert!(origin.abs() < 1e-5);
    // Greedy consistency: the refined input is at least as good as every
    // grid action and attains V.
    for (node, row) in coarse.q_grid.iter().enumerate() {
        let s = [coarse.grid.nodes[0][node / 41], coarse.grid.nodes[1][node % 41]];
        let q = coarse.q_at(&s, coarse.policy_grid[node]);
        let best = row.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(q <= best + 1e-12);
        assert!((q - coarse.v_grid[node]).abs() <= 1e-6);
    }
    // Restoring torque at a positive angle.
    assert!(coarse.policy_at(&[0.5, 0.0]) < 0.0);
    assert!(coarse.policy_at(&[-0.5, 0.0]) > 0.0);

    let fine = pendulum_dp(&env, &GridSpec { nodes_per_dim: 81, ..GridSpec::default() }).unwrap();
    let mut worst: f64 = 0.0;
    // Probes where the pendulum can still be caught; on the capture
    // boundary the value jumps by three orders of magnitude.
    for x in [-0.4, -0.2, 0.0, 0.2, 0.4] {
        for y in [-0.4, -0.2, 0.0, 0.2, 0.4] {
            let (c, f) = (coarse.value_at(&[x, y]), fine.value_at(&[x, y]));
            if x == 0.0 && y == 0.0 {
                assert!((c - f).abs() < 1e-5);
                continue;
            }
            worst = worst.max((c - f).abs() / f.abs());
        }
    }
    assert!(worst <= 0.05, "self-convergence {worst}");
    assert!(worst <= 5e-3, "tighter than required: {worst}");

    let mut csv = Vec::new();
    coarse.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 41 * 41 + 1);
}

#[test]
fn pendulum_scheme_matches_linearisation() {
    use mdpmpc::mpc::{policy, SolveOptions};
    use nalgebra::DMatrix;
    let env = PendulumEnv::default();
    let scheme = pendulum_scheme(&env, 10);
    let theta = pendulum_theta(0.25, &DMatrix::identity(2, 2), &DMatrix::identity(3, 3)).unwrap();
    let a = policy(&scheme, &theta, &[0.5, 0.0], &SolveOptions::default()).unwrap();
    assert!(a[0] < 0.0 && a[0] >= -0.8);
}
