//! Seeded random instances for property tests, sweeps and the CLI.

use crate::mdp::TabularMdp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

pub type InstanceRng = ChaCha8Rng;

pub fn rng(seed: u64) -> InstanceRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, a, b)`; used to split draws per episode
/// and step so that evaluation order cannot change the numbers drawn.
pub fn stream(seed: u64, a: u64, b: u64) -> InstanceRng {
    let mut x = splitmix(seed ^ splitmix(a.wrapping_add(0x9e37_79b9)));
    x = splitmix(x ^ splitmix(b.wrapping_add(0x7f4a_7c15)));
    ChaCha8Rng::seed_from_u64(x)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A dense random distribution over `n` outcomes (flat Dirichlet).
pub fn distribution<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let sum: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / sum).collect();
    // Push the rounding remainder onto the largest entry.
    let rem = 1.0 - p.iter().sum::<f64>();
    let (imax, _) = p
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
    p[imax] += rem;
    p
}

/// A distribution supported on a random subset of `support` outcomes.
pub fn sparse_distribution<R: Rng>(n: usize, support: usize, rng: &mut R) -> Vec<f64> {
    let support = support.clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..support {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let d = distribution(support, rng);
    let mut p = vec![0.0; n];
    for (k, &i) in idx[..support].iter().enumerate() {
        p[i] = d[k];
    }
    p
}

pub fn transition_table<R: Rng>(n_states: usize, n_actions: usize, rng: &mut R) -> Vec<Vec<Vec<f64>>> {
    (0..n_states)
        .map(|_| (0..n_actions).map(|_| distribution(n_states, rng)).collect())
        .collect()
}

/// Dense random MDP with stage costs uniform on `[0, 1)`.
pub fn random_mdp<R: Rng>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> TabularMdp {
    let transition = transition_table(n_states, n_actions, rng);
    let cost = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
        .collect();
    TabularMdp::new(transition, cost, gamma).expect("generated MDP is valid")
}
