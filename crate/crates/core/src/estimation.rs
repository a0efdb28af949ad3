//! Visit counters, empirical kernels and count-based bonuses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{forward_rollout, Distribution, Policy, SpaceDims, TransitionKernel, Trajectory};

/// Pair counts `N_n(x, a)` and transition counts `M_n(x' | x, a)` for
/// `n = 0..N-1`; a transition observed at step `n` feeds `p_{n+1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitCounters {
    dims: SpaceDims,
    pair_counts: Vec<u64>,
    triple_counts: Vec<u64>,
}

impl VisitCounters {
    pub fn new(dims: SpaceDims) -> Self {
        Self {
            dims,
            pair_counts: vec![0; dims.horizon * dims.pairs()],
            triple_counts: vec![0; dims.horizon * dims.pairs() * dims.num_states],
        }
    }

    pub fn dims(&self) -> SpaceDims {
        self.dims
    }

    #[inline]
    pub fn pair_count(&self, n: usize, state: usize, action: usize) -> u64 {
        self.pair_counts[n * self.dims.pairs() + self.dims.pair(state, action)]
    }

    #[inline]
    pub fn triple_count(&self, n: usize, state: usize, action: usize, next: usize) -> u64 {
        let xs = self.dims.num_states;
        self.triple_counts[(n * self.dims.pairs() + self.dims.pair(state, action)) * xs + next]
    }

    /// Pair counts of step `n` as a flattened `[x][a]` slice.
    pub fn pair_counts_at(&self, n: usize) -> &[u64] {
        let len = self.dims.pairs();
        &self.pair_counts[n * len..(n + 1) * len]
    }

    /// Adds every transition of `traj` to the counts.
    pub fn update(&mut self, traj: &Trajectory) -> Result<()> {
        let dims = self.dims;
        if traj.len() != dims.horizon + 1 {
            return Err(Error::DimensionMismatch {
                context: "trajectory length",
                expected: dims.horizon + 1,
                actual: traj.len(),
            });
        }
        let xs = dims.num_states;
        for (n, window) in traj.steps().windows(2).enumerate() {
            let (x, a) = window[0];
            let (next, _) = window[1];
            if x >= xs || next >= xs || a >= dims.num_actions {
                return Err(Error::Config(format!(
                    "trajectory step ({x}, {a}) -> {next} outside the state-action space"
                )));
            }
            let idx = n * dims.pairs() + dims.pair(x, a);
            self.pair_counts[idx] += 1;
            self.triple_counts[idx * xs + next] += 1;
        }
        debug_assert!(self.is_consistent());
        Ok(())
    }

    /// Checks `sum_{x'} M_n(x' | x, a) = N_n(x, a)` everywhere.
    pub fn is_consistent(&self) -> bool {
        let xs = self.dims.num_states;
        self.pair_counts
            .iter()
            .zip(self.triple_counts.chunks_exact(xs))
            .all(|(&n, row)| row.iter().sum::<u64>() == n)
    }

    /// Empirical kernel: count ratios on visited pairs, uniform rows elsewhere.
    pub fn empirical_kernel(&self) -> TransitionKernel {
        let dims = self.dims;
        let xs = dims.num_states;
        let uniform = 1.0 / xs as f64;
        let mut probs = Vec::with_capacity(self.triple_counts.len());
        for (&count, row) in self.pair_counts.iter().zip(self.triple_counts.chunks_exact(xs)) {
            if count == 0 {
                probs.extend(std::iter::repeat(uniform).take(xs));
            } else {
                let denom = count as f64;
                probs.extend(row.iter().map(|&m| m as f64 / denom));
            }
        }
        TransitionKernel::from_raw(dims, probs)
    }
}

/// Width constant `C_delta = sqrt(2 |X| log(|X||A| N T / delta))`.
pub fn confidence_width(dims: SpaceDims, num_episodes: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Config(format!("delta must lie in (0, 1), got {delta}")));
    }
    if num_episodes == 0 {
        return Err(Error::Config("number of episodes must be positive".into()));
    }
    let inner = dims.pairs() as f64 * dims.horizon as f64 * num_episodes as f64 / delta;
    Ok((2.0 * dims.num_states as f64 * inner.ln()).sqrt())
}

/// Constraint-slack bonus `b` and gradient bonus `b_bar`, both indexed
/// `[n][x][a]` for `n = 0..N-1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonusSchedule {
    dims: SpaceDims,
    slack: Vec<f64>,
    gradient: Vec<f64>,
    pub c_delta: f64,
    pub lipschitz: f64,
    pub delta: f64,
}

impl BonusSchedule {
    pub fn zeros(dims: SpaceDims) -> Self {
        Self {
            dims,
            slack: vec![0.0; dims.horizon * dims.pairs()],
            gradient: vec![0.0; dims.horizon * dims.pairs()],
            c_delta: 0.0,
            lipschitz: 0.0,
            delta: 0.0,
        }
    }

    /// Schedule from explicit `[n][x][a]` tensors, `n = 0..N-1`.
    pub fn from_tensors(dims: SpaceDims, slack: Vec<f64>, gradient: Vec<f64>) -> Result<Self> {
        let expected = dims.horizon * dims.pairs();
        for (t, context) in [(&slack, "slack bonus"), (&gradient, "gradient bonus")] {
            if t.len() != expected {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual: t.len(),
                });
            }
            if t.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
                return Err(Error::Domain(format!("{context} must be finite and non-negative")));
            }
        }
        Ok(Self {
            dims,
            slack,
            gradient,
            c_delta: 0.0,
            lipschitz: 0.0,
            delta: 0.0,
        })
    }

    pub fn dims(&self) -> SpaceDims {
        self.dims
    }

    /// `b_n` as a flattened `[x][a]` slice, `n` in `0..N`.
    #[inline]
    pub fn slack_at(&self, n: usize) -> &[f64] {
        let len = self.dims.pairs();
        &self.slack[n * len..(n + 1) * len]
    }

    /// `b_bar_n` as a flattened `[x][a]` slice, `n` in `0..N`.
    #[inline]
    pub fn gradient_at(&self, n: usize) -> &[f64] {
        let len = self.dims.pairs();
        &self.gradient[n * len..(n + 1) * len]
    }

    /// Multiplies both bonus tensors (and `c_delta`) by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.slack.iter_mut().for_each(|b| *b *= factor);
        self.gradient.iter_mut().for_each(|b| *b *= factor);
        self.c_delta *= factor;
        self
    }

    /// `sum_{n=0}^{N-1} <mu_n, b_n>` for a slice sequence indexed `0..=N`.
    pub fn slack_inner(&self, slices: &[Distribution]) -> f64 {
        (0..self.dims.horizon)
            .map(|n| {
                slices[n]
                    .mass()
                    .iter()
                    .zip(self.slack_at(n))
                    .map(|(m, b)| m * b)
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Bonuses `b = C_delta / sqrt(max(1, N))`, `b_bar = l (N - n) b`.
pub fn bonus_schedule(
    counters: &VisitCounters,
    delta: f64,
    lipschitz: f64,
    num_episodes: usize,
) -> Result<BonusSchedule> {
    if !(lipschitz > 0.0) {
        return Err(Error::Config(format!(
            "Lipschitz constant must be positive, got {lipschitz}"
        )));
    }
    let dims = counters.dims();
    let c_delta = confidence_width(dims, num_episodes, delta)?;
    let len = dims.pairs();
    let mut slack = Vec::with_capacity(dims.horizon * len);
    let mut gradient = Vec::with_capacity(dims.horizon * len);
    for n in 0..dims.horizon {
        let remaining = (dims.horizon - n) as f64;
        for &count in counters.pair_counts_at(n) {
            let b = c_delta / (count.max(1) as f64).sqrt();
            slack.push(b);
            gradient.push(lipschitz * remaining * b);
        }
    }
    Ok(BonusSchedule {
        dims,
        slack,
        gradient,
        c_delta,
        lipschitz,
        delta,
    })
}

/// `rho_tilde * P_pi` under the restarted-agent kernel.
pub fn propagate_rho_tilde(
    rho_tilde: &Distribution,
    policy: &Policy,
    tilde_kernel: &TransitionKernel,
) -> Result<Distribution> {
    let mu = forward_rollout(policy, rho_tilde, tilde_kernel)?;
    Ok(mu.into_slices().pop().expect("rollout has N + 1 slices"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{episode_transition_matrix, sample_pair, sample_trajectory};
    use crate::random::{random_distribution, random_kernel, random_policy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> SpaceDims {
        SpaceDims::new(3, 2, 3).unwrap()
    }

    #[test]
    fn single_trajectory_counts_once_per_step() {
        let d = dims();
        let mut c = VisitCounters::new(d);
        let traj = Trajectory::new(d, vec![(0, 0), (1, 1), (2, 0), (2, 1)]).unwrap();
        c.update(&traj).unwrap();
        for n in 0..d.horizon {
            assert_eq!(c.pair_counts_at(n).iter().sum::<u64>(), 1);
        }
        assert_eq!(c.triple_count(0, 0, 0, 1), 1);
        c.update(&traj).unwrap();
        assert_eq!(c.pair_count(1, 1, 1), 2);
        assert_eq!(c.triple_count(2, 2, 0, 2), 2);
        assert!(c.is_consistent());
    }

    #[test]
    fn fifty_trajectories_sum_to_fifty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = SpaceDims::new(4, 3, 5).unwrap();
        let kernel = random_kernel(d, &mut rng);
        let policy = random_policy(d, &mut rng);
        let init = random_distribution(d.pairs(), &mut rng);
        let mut c = VisitCounters::new(d);
        for _ in 0..50 {
            let start = sample_pair(d, &init, &mut rng);
            c.update(&sample_trajectory(&policy, &kernel, start, &mut rng).unwrap())
                .unwrap();
        }
        for n in 0..d.horizon {
            assert_eq!(c.pair_counts_at(n).iter().sum::<u64>(), 50);
        }
        assert!(c.is_consistent());
        let k = c.empirical_kernel();
        assert!(k.max_row_defect() < 1e-12);
    }

    #[test]
    fn empirical_kernel_ratios_and_uniform_rows() {
        let d = dims();
        let mut c = VisitCounters::new(d);
        c.update(&Trajectory::new(d, vec![(0, 0), (1, 0), (0, 0), (1, 0)]).unwrap())
            .unwrap();
        c.update(&Trajectory::new(d, vec![(0, 0), (2, 0), (0, 0), (1, 0)]).unwrap())
            .unwrap();
        let k = c.empirical_kernel();
        assert_eq!(k.row(1, 0, 0), &[0.0, 0.5, 0.5]);
        assert_eq!(k.row(2, 1, 0), &[1.0, 0.0, 0.0]);
        assert_eq!(k.row(3, 0, 0), &[0.0, 1.0, 0.0]);
        let u = 1.0 / 3.0;
        assert_eq!(k.row(1, 0, 1), &[u, u, u]);
    }

    #[test]
    fn bonuses_follow_counts() {
        let d = dims();
        let mut c = VisitCounters::new(d);
        let traj = Trajectory::new(d, vec![(0, 0), (1, 0), (2, 0), (0, 0)]).unwrap();
        for _ in 0..4 {
            c.update(&traj).unwrap();
        }
        let b = bonus_schedule(&c, 0.1, 2.0, 100).unwrap();
        let cd = b.c_delta;
        // Unvisited pair at n = 0.
        assert_eq!(b.slack_at(0)[d.pair(1, 1)], cd);
        assert_eq!(b.gradient_at(0)[d.pair(1, 1)], 2.0 * 3.0 * cd);
        // Visited four times: halved.
        assert_eq!(b.slack_at(0)[d.pair(0, 0)], cd / 2.0);
        assert_eq!(b.gradient_at(2)[d.pair(2, 0)], 2.0 * 1.0 * cd / 2.0);
    }

    #[test]
    fn bonus_rejects_bad_delta() {
        let c = VisitCounters::new(dims());
        assert!(bonus_schedule(&c, 0.0, 1.0, 10).is_err());
        assert!(bonus_schedule(&c, 1.0, 1.0, 10).is_err());
        assert!(bonus_schedule(&c, 0.1, 0.0, 10).is_err());
    }

    #[test]
    fn confidence_width_paper_scale() {
        // sqrt(2 * 121 * ln(121 * 5 * 40 * 5000 / 0.1)), evaluated independently.
        let d = SpaceDims::new(121, 5, 40).unwrap();
        let c = confidence_width(d, 5000, 0.1).unwrap();
        assert!((c - 71.14183340037228).abs() < 1e-9, "c_delta = {c}");
    }

    #[test]
    fn rho_tilde_matches_episode_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = SpaceDims::new(4, 2, 5).unwrap();
        let kernel = random_kernel(d, &mut rng);
        let policy = random_policy(d, &mut rng);
        let rho = random_distribution(d.pairs(), &mut rng);
        let via_matrix = episode_transition_matrix(&policy, &kernel)
            .unwrap()
            .apply(&rho)
            .unwrap();
        let via_rollout = propagate_rho_tilde(&rho, &policy, &kernel).unwrap();
        for (a, b) in via_matrix.mass().iter().zip(via_rollout.mass()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rho_tilde_fixed_point_and_swap() {
        // Swap kernel with one action: the uniform state distribution is fixed.
        let d = SpaceDims::new(2, 1, 1).unwrap();
        let swap = TransitionKernel::stationary(d, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let pi = Policy::uniform(d);
        let fixed = Distribution::uniform(2);
        let out = propagate_rho_tilde(&fixed, &pi, &swap).unwrap();
        assert!(out.l1_distance(&fixed) < 1e-12);
        let skew = Distribution::new(vec![0.2, 0.8]).unwrap();
        let out = propagate_rho_tilde(&skew, &pi, &swap).unwrap();
        assert_eq!(out.mass(), &[0.8, 0.2]);
    }
}
