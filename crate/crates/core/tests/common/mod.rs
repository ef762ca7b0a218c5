#![allow(dead_code)]

use mdpmpc::mdp::TabularMdp;

/// Dense Gaussian elimination with partial pivoting, kept separate from the
/// library's linear algebra so it can serve as an oracle.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    x
}

/// Discounted value of a deterministic policy with finite costs.
pub fn evaluate_oracle(mdp: &TabularMdp, policy: &[usize]) -> Vec<f64> {
    let n = mdp.n_states();
    let g = mdp.gamma();
    let a: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            (0..n)
                .map(|t| {
                    let d = if s == t { 1.0 } else { 0.0 };
                    d - g * mdp.transition()[s][policy[s]][t]
                })
                .collect()
        })
        .collect();
    let b = (0..n).map(|s| mdp.stage_cost()[s][policy[s]]).collect();
    gauss_solve(a, b)
}

/// All deterministic policies of an `n`-state, `m`-action MDP.
pub fn all_policies(n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..m).map(move |a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    out
}

/// Elementwise minimum over all deterministic policies of their exact values
/// (the optimal value, since an optimal deterministic policy exists).
pub fn brute_force_optimum(mdp: &TabularMdp) -> (Vec<f64>, Vec<usize>) {
    let mut best_v = vec![f64::INFINITY; mdp.n_states()];
    let mut best_sum = f64::INFINITY;
    let mut best_pol = vec![];
    for pol in all_policies(mdp.n_states(), mdp.n_actions()) {
        let v = evaluate_oracle(mdp, &pol);
        for (b, x) in best_v.iter_mut().zip(&v) {
            *b = b.min(*x);
        }
        let s: f64 = v.iter().sum();
        if s < best_sum - 1e-12 {
            best_sum = s;
            best_pol = pol;
        }
    }
    (best_v, best_pol)
}
