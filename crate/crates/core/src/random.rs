//! Seeded random instance generators used by tests, oracles and the CLI.

use rand::Rng;

use crate::mdp::{Distribution, Policy, SpaceDims, TransitionKernel};

/// Random point of the simplex. Entries are positive; one or two rows in
/// the generated kernels/policies are sparsified by [`random_kernel`].
pub fn random_simplex<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    // Exponential spacings give a uniform draw on the simplex.
    let mut v: Vec<f64> = (0..len)
        .map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-3)
        .collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

pub fn random_distribution<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Distribution {
    Distribution::new(random_simplex(len, rng)).expect("simplex draw is normalized")
}

/// Time-dependent kernel with random rows; roughly a third of the rows put
/// zero mass on one next state so sparse patterns are exercised too.
pub fn random_kernel<R: Rng + ?Sized>(dims: SpaceDims, rng: &mut R) -> TransitionKernel {
    let xs = dims.num_states;
    let mut probs = Vec::with_capacity(dims.horizon * dims.pairs() * xs);
    for _ in 0..dims.horizon * dims.pairs() {
        let mut row = random_simplex(xs, rng);
        if xs > 1 && rng.gen_bool(0.3) {
            let k = rng.gen_range(0..xs);
            let dropped = row[k];
            row[k] = 0.0;
            let rest = 1.0 - dropped;
            row.iter_mut().for_each(|p| *p /= rest);
        }
        probs.extend(row);
    }
    TransitionKernel::new(dims, probs).expect("random rows are normalized")
}

/// Strictly positive random policy.
pub fn random_policy<R: Rng + ?Sized>(dims: SpaceDims, rng: &mut R) -> Policy {
    let mut probs = Vec::with_capacity(dims.horizon * dims.pairs());
    for _ in 0..dims.horizon * dims.num_states {
        probs.extend(random_simplex(dims.num_actions, rng));
    }
    Policy::new(dims, probs).expect("random rows are normalized")
}
