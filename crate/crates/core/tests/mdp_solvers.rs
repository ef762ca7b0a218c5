mod common;

use common::{brute_force_optimum, evaluate_oracle};
use mdpmpc::mdp::{
    policy_evaluation, q_from_v, relative_value_iteration, shift_stage_cost, value_iteration,
    TabularMdp,
};
use mdpmpc::random::{random_mdp, rng};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn two_state_chain_matches_enumeration() {
    // s0 absorbing with zero cost, s1 pays 1 and can stay or move to s0.
    let p = vec![
        vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        vec![vec![0.0, 1.0], vec![1.0, 0.0]],
    ];
    let cost = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
    let mdp = TabularMdp::new(p, cost, 0.5).unwrap();
    let sol = value_iteration(&mdp, 1e-13, 10_000).unwrap();
    let (oracle, _) = brute_force_optimum(&mdp);
    for (a, b) in sol.v.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(sol.v[1], 1.0);
    assert_eq!(sol.policy, vec![0, 1]);
}

#[test]
fn greedy_policy_consistent_with_returned_values() {
    let mut r = rng(11);
    let mdp = random_mdp(10, 3, 0.9, &mut r);
    let sol = value_iteration(&mdp, 1e-10, 100_000).unwrap();
    let q = q_from_v(&mdp, &sol.v);
    for s in 0..10 {
        let best = (0..3).min_by(|&a, &b| q[s][a].total_cmp(&q[s][b])).unwrap();
        assert_eq!(sol.policy[s], best);
        assert!((q[s][best] - sol.v[s]).abs() <= sol.bellman_residual + 1e-15);
    }
    assert!(sol.bellman_residual <= 1e-10);
}

#[test]
fn optimal_policy_evaluates_to_optimal_value() {
    let mut r = rng(5);
    let mdp = random_mdp(5, 3, 0.9, &mut r);
    let sol = value_iteration(&mdp, 1e-13, 100_000).unwrap();
    let v_pi = policy_evaluation(&mdp, &sol.policy).unwrap();
    for (a, b) in v_pi.iter().zip(&sol.v) {
        assert!((a - b).abs() < 1e-9);
    }
    // Any other policy is no better anywhere.
    let mut worse = sol.policy.clone();
    for a in worse.iter_mut() {
        *a = (*a + 1) % 3;
    }
    let v_w = policy_evaluation(&mdp, &worse).unwrap();
    for (a, b) in v_w.iter().zip(&sol.v) {
        assert!(*a >= *b - 1e-9);
    }
    let oracle = evaluate_oracle(&mdp, &worse);
    for (a, b) in v_w.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn q_from_optimal_values_recovers_values() {
    let mut r = rng(21);
    let mdp = random_mdp(7, 4, 0.8, &mut r);
    let sol = value_iteration(&mdp, 1e-12, 100_000).unwrap();
    let q = q_from_v(&mdp, &sol.v);
    for s in 0..7 {
        let m = q[s].iter().copied().fold(f64::INFINITY, f64::min);
        assert!((m - sol.v[s]).abs() <= sol.bellman_residual + 1e-15);
    }
}

#[test]
fn gain_shift_zeroes_the_gain() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let mdp = random_mdp(6, 3, 1.0, &mut r);
        let avg = relative_value_iteration(&mdp, 1e-12, 100_000).unwrap();
        let shifted = shift_stage_cost(&mdp, avg.gain);
        let again = relative_value_iteration(&shifted, 1e-12, 100_000).unwrap();
        assert!(again.gain.abs() < 1e-11, "seed {seed}: {}", again.gain);
        assert_eq!(again.bias[0], 0.0);
        for (a, b) in again.bias.iter().zip(&avg.bias) {
            assert!((a - b).abs() < 1e-9);
        }
        // The returned policy has the returned gain, state-independently.
        let (g_pi, _) = mdpmpc::mdp::policy_gain_bias(&mdp, &avg.policy).unwrap();
        assert!((g_pi - avg.gain).abs() < 1e-10);
    }
}

#[test]
fn undiscounted_value_iteration_returns_bias() {
    let mut r = rng(2);
    let mdp = random_mdp(5, 2, 1.0, &mut r);
    assert!(value_iteration(&mdp, 1e-10, 100_000).is_err());
    let avg = relative_value_iteration(&mdp, 1e-12, 100_000).unwrap();
    let shifted = shift_stage_cost(&mdp, avg.gain);
    let sol = value_iteration(&shifted, 1e-11, 100_000).unwrap();
    assert_eq!(sol.v[0], 0.0);
    assert!(sol.bellman_residual < 1e-10);
    let rel = policy_evaluation(&shifted, &sol.policy).unwrap();
    for (a, b) in rel.iter().zip(&sol.v) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn mdp_strategy() -> impl Strategy<Value = TabularMdp> {
    (1usize..=4, 1usize..=3, 0.05f64..=0.9, any::<u64>())
        .prop_map(|(n, m, g, seed)| random_mdp(n, m, g, &mut rng(seed)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn value_iteration_matches_exhaustive_enumeration(mdp in mdp_strategy()) {
        let sol = value_iteration(&mdp, 1e-12, 100_000).unwrap();
        let (oracle, _) = brute_force_optimum(&mdp);
        for (a, b) in sol.v.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        // The greedy policy is itself optimal.
        let v_pi = evaluate_oracle(&mdp, &sol.policy);
        for (a, b) in v_pi.iter().zip(&oracle) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                prop_assert!(sol.advantage[s][a] >= -sol.bellman_residual - 1e-15);
            }
        }
    }

    #[test]
    fn bellman_operator_is_monotone_and_contracting(mdp in mdp_strategy(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = mdp.n_states();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let w: Vec<f64> = v.iter().map(|x| x + r.random_range(0.0..3.0)).collect();
        let tv = mdp.bellman(&v);
        let tw = mdp.bellman(&w);
        for (a, b) in tv.iter().zip(&tw) {
            prop_assert!(*a <= *b + 1e-12);
        }
        let u: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let tu = mdp.bellman(&u);
        let d_in = v.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let d_out = tv.iter().zip(&tu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(d_out <= mdp.gamma() * d_in + 1e-12);
    }
}
