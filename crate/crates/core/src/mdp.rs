//! Tabular MDP primitives.
//!
//! Time indexing follows the usual finite-horizon convention: an episode has
//! steps `n = 0..=N`, the state-action pair at step 0 is drawn from the initial
//! distribution, and the kernel `p_n` together with the policy `pi_n`
//! (`n = 1..=N`) move the pair at step `n - 1` to the pair at step `n`.
//! Kernels and policies therefore expose `n` in `1..=N`, while occupancy
//! measures carry `N + 1` slices indexed `0..=N`.
//!
//! State-action pairs are flattened row-major as `x * |A| + a`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for simplex checks on freshly constructed data.
pub const BUILD_TOL: f64 = 1e-12;
/// Absolute tolerance for simplex checks after long products.
pub const DRIFT_TOL: f64 = 1e-10;
/// Largest renormalization allowed at an episode boundary.
pub const MAX_RENORMALIZATION: f64 = 1e-9;
/// State mass below which policy extraction falls back to a uniform row.
pub const ZERO_MASS: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceDims {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
}

impl SpaceDims {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || horizon == 0 {
            return Err(Error::Config(format!(
                "space dimensions must be positive (|X| = {num_states}, |A| = {num_actions}, N = {horizon})"
            )));
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
        })
    }

    /// Number of state-action pairs `|X||A|`.
    #[inline]
    pub fn pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    #[inline]
    pub fn pair(&self, state: usize, action: usize) -> usize {
        state * self.num_actions + action
    }

    #[inline]
    pub fn split_pair(&self, pair: usize) -> (usize, usize) {
        (pair / self.num_actions, pair % self.num_actions)
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Self::new(self.num_states, self.num_actions, horizon)
    }

    pub(crate) fn ensure_eq(&self, other: &SpaceDims, context: &'static str) -> Result<()> {
        if self.num_states != other.num_states {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.num_states,
                actual: other.num_states,
            });
        }
        if self.num_actions != other.num_actions {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.num_actions,
                actual: other.num_actions,
            });
        }
        if self.horizon != other.horizon {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.horizon,
                actual: other.horizon,
            });
        }
        Ok(())
    }

    pub(crate) fn ensure_pairs(&self, len: usize, context: &'static str) -> Result<()> {
        if len != self.pairs() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.pairs(),
                actual: len,
            });
        }
        Ok(())
    }
}

fn check_simplex_rows(
    values: &[f64],
    row_len: usize,
    tol: f64,
    context: &'static str,
) -> Result<()> {
    for (i, row) in values.chunks_exact(row_len).enumerate() {
        let mut sum = 0.0;
        for &p in row {
            if !(0.0..=1.0 + tol).contains(&p) || !p.is_finite() {
                return Err(Error::InvalidProbability {
                    context,
                    detail: format!("row {i} has entry {p}"),
                });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > tol {
            return Err(Error::InvalidProbability {
                context,
                detail: format!("row {i} sums to {sum}"),
            });
        }
    }
    Ok(())
}

/// Time-indexed transition kernel `p_n(x' | x, a)` for `n = 1..=N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionKernel {
    dims: SpaceDims,
    probs: Vec<f64>,
}

impl TransitionKernel {
    /// `probs` is laid out as `[n - 1][x][a][x']`.
    pub fn new(dims: SpaceDims, probs: Vec<f64>) -> Result<Self> {
        let expected = dims.horizon * dims.pairs() * dims.num_states;
        if probs.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "transition kernel",
                expected,
                actual: probs.len(),
            });
        }
        check_simplex_rows(&probs, dims.num_states, BUILD_TOL, "transition kernel")?;
        Ok(Self { dims, probs })
    }

    /// Replicates one `[x][a][x']` kernel across all `N` steps.
    pub fn stationary(dims: SpaceDims, base: &[f64]) -> Result<Self> {
        let per_step = dims.pairs() * dims.num_states;
        if base.len() != per_step {
            return Err(Error::DimensionMismatch {
                context: "stationary kernel",
                expected: per_step,
                actual: base.len(),
            });
        }
        let mut probs = Vec::with_capacity(per_step * dims.horizon);
        for _ in 0..dims.horizon {
            probs.extend_from_slice(base);
        }
        Self::new(dims, probs)
    }

    pub(crate) fn from_raw(dims: SpaceDims, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), dims.horizon * dims.pairs() * dims.num_states);
        Self { dims, probs }
    }

    pub fn dims(&self) -> SpaceDims {
        self.dims
    }

    /// Next-state distribution `p_n(. | x, a)`, `n` in `1..=N`.
    #[inline]
    pub fn row(&self, n: usize, state: usize, action: usize) -> &[f64] {
        debug_assert!(n >= 1 && n <= self.dims.horizon);
        let xs = self.dims.num_states;
        let start = ((n - 1) * self.dims.pairs() + self.dims.pair(state, action)) * xs;
        &self.probs[start..start + xs]
    }

    /// All rows of step `n` as a `[x][a][x']` slice.
    #[inline]
    pub fn step(&self, n: usize) -> &[f64] {
        let len = self.dims.pairs() * self.dims.num_states;
        &self.probs[(n - 1) * len..n * len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Maximum absolute row-sum defect over all `(n, x, a)`.
    pub fn max_row_defect(&self) -> f64 {
        self.probs
            .chunks_exact(self.dims.num_states)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Non-stationary Markov policy `pi_n(a | x)` for `n = 1..=N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    dims: SpaceDims,
    probs: Vec<f64>,
}

impl Policy {
    /// `probs` is laid out as `[n - 1][x][a]`.
    pub fn new(dims: SpaceDims, probs: Vec<f64>) -> Result<Self> {
        let expected = dims.horizon * dims.pairs();
        if probs.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "policy",
                expected,
                actual: probs.len(),
            });
        }
        check_simplex_rows(&probs, dims.num_actions, BUILD_TOL, "policy")?;
        Ok(Self { dims, probs })
    }

    pub fn uniform(dims: SpaceDims) -> Self {
        let p = 1.0 / dims.num_actions as f64;
        Self {
            dims,
            probs: vec![p; dims.horizon * dims.pairs()],
        }
    }

    pub(crate) fn from_raw(dims: SpaceDims, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), dims.horizon * dims.pairs());
        Self { dims, probs }
    }

    pub fn dims(&self) -> SpaceDims {
        self.dims
    }

    /// Action distribution `pi_n(. | x)`, `n` in `1..=N`.
    #[inline]
    pub fn row(&self, n: usize, state: usize) -> &[f64] {
        debug_assert!(n >= 1 && n <= self.dims.horizon);
        let a = self.dims.num_actions;
        let start = ((n - 1) * self.dims.num_states + state) * a;
        &self.probs[start..start + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Raw rows for in-place edits; callers keep every row on the simplex.
    pub(crate) fn probs_mut(&mut self) -> &mut [f64] {
        &mut self.probs
    }

    /// `(1 - rate) * pi + rate * uniform`.
    pub fn mixed_with_uniform(&self, rate: f64) -> Self {
        let u = rate / self.dims.num_actions as f64;
        Self {
            dims: self.dims,
            probs: self.probs.iter().map(|&p| (1.0 - rate) * p + u).collect(),
        }
    }

    pub fn min_entry(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &Policy) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Probability distribution over flattened state-action pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    mass: Vec<f64>,
}

impl Distribution {
    pub fn new(mass: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(mass, BUILD_TOL)
    }

    pub fn with_tolerance(mass: Vec<f64>, tol: f64) -> Result<Self> {
        if mass.is_empty() {
            return Err(Error::InvalidProbability {
                context: "distribution",
                detail: "empty support".into(),
            });
        }
        if let Some(bad) = mass.iter().find(|m| !(**m >= 0.0) || !m.is_finite()) {
            return Err(Error::InvalidProbability {
                context: "distribution",
                detail: format!("entry {bad}"),
            });
        }
        let sum: f64 = mass.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::InvalidProbability {
                context: "distribution",
                detail: format!("mass sums to {sum}"),
            });
        }
        Ok(Self { mass })
    }

    /// Point mass at flattened pair `pair`.
    pub fn dirac(len: usize, pair: usize) -> Self {
        let mut mass = vec![0.0; len];
        mass[pair] = 1.0;
        Self { mass }
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            mass: vec![1.0 / len as f64; len],
        }
    }

    pub(crate) fn from_raw(mass: Vec<f64>) -> Self {
        Self { mass }
    }

    #[inline]
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.mass
    }

    pub fn l1_distance(&self, other: &Distribution) -> f64 {
        self.mass
            .iter()
            .zip(&other.mass)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// State marginal `sum_a mass(x, a)`.
    pub fn state_marginal(&self, num_actions: usize) -> Vec<f64> {
        self.mass
            .chunks_exact(num_actions)
            .map(|row| row.iter().sum())
            .collect()
    }

    /// Clamps negatives and rescales to unit mass, returning the
    /// L1 size of the correction. Fails if the correction exceeds `limit`.
    pub fn renormalize(&mut self, limit: f64) -> Result<f64> {
        let before = self.mass.clone();
        for m in &mut self.mass {
            if *m < 0.0 {
                *m = 0.0;
            }
        }
        let sum: f64 = self.mass.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Domain("cannot renormalize a zero-mass vector".into()));
        }
        for m in &mut self.mass {
            *m /= sum;
        }
        let amount: f64 = before
            .iter()
            .zip(&self.mass)
            .map(|(a, b)| (a - b).abs())
            .sum();
        if amount > limit {
            return Err(Error::Domain(format!(
                "renormalization of {amount:.3e} exceeds the drift limit {limit:.0e}"
            )));
        }
        Ok(amount)
    }
}

/// Sequence `(mu_n)_{n = 0..=N}` of state-action distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    dims: SpaceDims,
    slices: Vec<Distribution>,
}

impl OccupancyMeasure {
    pub fn new(dims: SpaceDims, slices: Vec<Distribution>) -> Result<Self> {
        if slices.len() != dims.horizon + 1 {
            return Err(Error::DimensionMismatch {
                context: "occupancy slices",
                expected: dims.horizon + 1,
                actual: slices.len(),
            });
        }
        for slice in &slices {
            dims.ensure_pairs(slice.len(), "occupancy slice")?;
        }
        Ok(Self { dims, slices })
    }

    /// All-zero slices, used as a buffer for [`SparseKernel::rollout_into`].
    pub(crate) fn zeros(dims: SpaceDims) -> Self {
        let slices = (0..=dims.horizon)
            .map(|_| Distribution::from_raw(vec![0.0; dims.pairs()]))
            .collect();
        Self { dims, slices }
    }

    pub fn dims(&self) -> SpaceDims {
        self.dims
    }

    #[inline]
    pub fn slice(&self, n: usize) -> &Distribution {
        &self.slices[n]
    }

    pub fn slices(&self) -> &[Distribution] {
        &self.slices
    }

    pub fn initial(&self) -> &Distribution {
        &self.slices[0]
    }

    pub fn terminal(&self) -> &Distribution {
        &self.slices[self.dims.horizon]
    }

    pub fn into_slices(self) -> Vec<Distribution> {
        self.slices
    }

    /// `sup_n ||mu_n - nu_n||_1` over all slices.
    pub fn inf_one_distance(&self, other: &OccupancyMeasure) -> f64 {
        self.slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| a.l1_distance(b))
            .fold(0.0, f64::max)
    }
}

/// State-action path `(x_n, a_n)_{n = 0..=N}` of one agent over one episode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    steps: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn new(dims: SpaceDims, steps: Vec<(usize, usize)>) -> Result<Self> {
        if steps.len() != dims.horizon + 1 {
            return Err(Error::DimensionMismatch {
                context: "trajectory length",
                expected: dims.horizon + 1,
                actual: steps.len(),
            });
        }
        if let Some(&(x, a)) = steps
            .iter()
            .find(|(x, a)| *x >= dims.num_states || *a >= dims.num_actions)
        {
            return Err(Error::Config(format!(
                "trajectory step ({x}, {a}) outside the state-action space"
            )));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[(usize, usize)] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

fn ensure_kernel_policy(policy: &Policy, kernel: &TransitionKernel) -> Result<()> {
    kernel.dims().ensure_eq(&policy.dims(), "policy vs kernel")
}

/// One forward step of the flow equation: pushes `current` through
/// `p_{n}` and `pi_{n}` into `next`.
#[inline]
pub(crate) fn push_forward(
    dims: SpaceDims,
    current: &[f64],
    kernel_step: &[f64],
    policy: &Policy,
    n: usize,
    next: &mut [f64],
) {
    let xs = dims.num_states;
    let mut marginal = vec![0.0; xs];
    for (pair, &m) in current.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let row = &kernel_step[pair * xs..(pair + 1) * xs];
        for (acc, &p) in marginal.iter_mut().zip(row) {
            *acc += m * p;
        }
    }
    for (x, &mx) in marginal.iter().enumerate() {
        let pi = policy.row(n, x);
        let out = &mut next[x * dims.num_actions..(x + 1) * dims.num_actions];
        for (o, &p) in out.iter_mut().zip(pi) {
            *o = mx * p;
        }
    }
}

/// Row-compressed copy of a kernel for repeated passes. Rows spread evenly
/// over all states, as the empirical kernel uses for unvisited pairs, are
/// kept as a flag; every other row keeps only its nonzero entries.
#[derive(Clone, Debug)]
pub struct SparseKernel {
    dims: SpaceDims,
    /// Per `(step, pair)`: start and end into `entries`, or `None` if uniform.
    rows: Vec<Option<(u32, u32)>>,
    entries: Vec<(u32, f64)>,
}

impl SparseKernel {
    pub fn new(kernel: &TransitionKernel) -> Self {
        let dims = kernel.dims();
        let xs = dims.num_states;
        let mut rows = Vec::with_capacity(dims.horizon * dims.pairs());
        let mut entries = Vec::new();
        for row in kernel.as_slice().chunks_exact(xs) {
            if xs > 1 && row.iter().all(|&p| p == row[0]) {
                rows.push(None);
                continue;
            }
            let start = entries.len() as u32;
            entries.extend(
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(x, &p)| (x as u32, p)),
            );
            rows.push(Some((start, entries.len() as u32)));
        }
        Self { dims, rows, entries }
    }

    pub fn dims(&self) -> SpaceDims {
        self.dims
    }

    /// `sum_x' p_n(x' | pair) values[x']`, with `mean` the plain average of
    /// `values` (used by uniform rows).
    #[inline]
    pub fn expect(&self, n: usize, pair: usize, values: &[f64], mean: f64) -> f64 {
        match self.rows[(n - 1) * self.dims.pairs() + pair] {
            None => mean,
            Some((a, b)) => self.entries[a as usize..b as usize]
                .iter()
                .map(|&(x, p)| p * values[x as usize])
                .sum(),
        }
    }

    /// Adds `sum_x' p_n(x' | pair) values[x']` to `out[pair]` for every pair.
    pub(crate) fn add_expectations(&self, n: usize, values: &[f64], out: &mut [f64]) {
        let pairs = self.dims.pairs();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let rows = &self.rows[(n - 1) * pairs..n * pairs];
        for (o, row) in out.iter_mut().zip(rows) {
            *o += match *row {
                None => mean,
                Some((a, b)) => self.entries[a as usize..b as usize]
                    .iter()
                    .map(|&(x, p)| p * values[x as usize])
                    .sum::<f64>(),
            };
        }
    }

    /// Next-state marginal of step `n` from the pair distribution `current`.
    pub fn state_marginal(&self, n: usize, current: &[f64], out: &mut [f64]) {
        let pairs = self.dims.pairs();
        out.fill(0.0);
        let mut spread = 0.0;
        let rows = &self.rows[(n - 1) * pairs..n * pairs];
        for (&m, row) in current.iter().zip(rows) {
            if m == 0.0 {
                continue;
            }
            match *row {
                None => spread += m,
                Some((a, b)) => {
                    for &(x, p) in &self.entries[a as usize..b as usize] {
                        out[x as usize] += m * p;
                    }
                }
            }
        }
        if spread != 0.0 {
            let share = spread / self.dims.num_states as f64;
            out.iter_mut().for_each(|o| *o += share);
        }
    }

    /// Same as [`forward_rollout`] on the kernel this was built from, up to
    /// summation order.
    pub fn rollout(&self, policy: &Policy, init: &Distribution) -> Result<OccupancyMeasure> {
        let mut out = OccupancyMeasure::zeros(self.dims);
        self.rollout_into(policy, init, &mut out, &mut Vec::new())?;
        Ok(out)
    }

    /// [`SparseKernel::rollout`] into an existing measure of the same
    /// dimensions; `marginal` is scratch space.
    pub fn rollout_into(
        &self,
        policy: &Policy,
        init: &Distribution,
        out: &mut OccupancyMeasure,
        marginal: &mut Vec<f64>,
    ) -> Result<()> {
        let dims = self.dims;
        dims.ensure_eq(&policy.dims(), "policy")?;
        dims.ensure_eq(&out.dims, "occupancy buffer")?;
        dims.ensure_pairs(init.len(), "initial distribution")?;
        let na = dims.num_actions;
        marginal.resize(dims.num_states, 0.0);
        out.slices[0].mass.copy_from_slice(init.mass());
        for n in 1..=dims.horizon {
            let (done, rest) = out.slices.split_at_mut(n);
            self.state_marginal(n, &done[n - 1].mass, marginal);
            let next = rest[0].mass.chunks_exact_mut(na);
            let rows = policy.probs[(n - 1) * dims.pairs()..n * dims.pairs()].chunks_exact(na);
            for ((out, row), &mx) in next.zip(rows).zip(marginal.iter()) {
                for (o, &p) in out.iter_mut().zip(row) {
                    *o = mx * p;
                }
            }
        }
        Ok(())
    }
}

/// Occupancy measure induced by `policy` from `init` under `kernel`.
pub fn forward_rollout(
    policy: &Policy,
    init: &Distribution,
    kernel: &TransitionKernel,
) -> Result<OccupancyMeasure> {
    ensure_kernel_policy(policy, kernel)?;
    let dims = kernel.dims();
    dims.ensure_pairs(init.len(), "initial distribution")?;
    let mut slices = Vec::with_capacity(dims.horizon + 1);
    slices.push(init.clone());
    for n in 1..=dims.horizon {
        let mut next = vec![0.0; dims.pairs()];
        push_forward(dims, slices[n - 1].mass(), kernel.step(n), policy, n, &mut next);
        slices.push(Distribution::from_raw(next));
    }
    Ok(OccupancyMeasure { dims, slices })
}

/// Row-stochastic `|X||A| x |X||A|` matrix of the full-episode map `P_pi`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl EpisodeMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn entry(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.size + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.entries[from * self.size..(from + 1) * self.size]
    }

    /// `nu * P_pi`.
    pub fn apply(&self, nu: &Distribution) -> Result<Distribution> {
        if nu.len() != self.size {
            return Err(Error::DimensionMismatch {
                context: "episode matrix application",
                expected: self.size,
                actual: nu.len(),
            });
        }
        let mut out = vec![0.0; self.size];
        for (from, &m) in nu.mass().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.row(from)) {
                *o += m * p;
            }
        }
        Ok(Distribution::from_raw(out))
    }
}

/// Composes the per-step maps `P^pi_1 ... P^pi_N` into the episode map.
pub fn episode_transition_matrix(
    policy: &Policy,
    kernel: &TransitionKernel,
) -> Result<EpisodeMatrix> {
    ensure_kernel_policy(policy, kernel)?;
    let dims = kernel.dims();
    let size = dims.pairs();
    let mut entries = Vec::with_capacity(size * size);
    let mut current = vec![0.0; size];
    let mut next = vec![0.0; size];
    for start in 0..size {
        current.iter_mut().for_each(|v| *v = 0.0);
        current[start] = 1.0;
        for n in 1..=dims.horizon {
            push_forward(dims, &current, kernel.step(n), policy, n, &mut next);
            std::mem::swap(&mut current, &mut next);
        }
        entries.extend_from_slice(&current);
    }
    Ok(EpisodeMatrix { size, entries })
}

/// Conditional action distributions of `mu`; states with mass below
/// [`ZERO_MASS`] get a uniform row.
pub fn policy_from_occupancy(mu: &OccupancyMeasure) -> Policy {
    let dims = mu.dims();
    let na = dims.num_actions;
    let uniform = 1.0 / na as f64;
    let mut probs = Vec::with_capacity(dims.horizon * dims.pairs());
    for n in 1..=dims.horizon {
        for row in mu.slice(n).mass().chunks_exact(na) {
            let total: f64 = row.iter().sum();
            if total > ZERO_MASS {
                probs.extend(row.iter().map(|m| m / total));
            } else {
                probs.extend(std::iter::repeat(uniform).take(na));
            }
        }
    }
    Policy::from_raw(dims, probs)
}

/// Largest violation of the flow constraints defining `M^p_init`.
pub fn bellman_flow_residual(
    mu: &OccupancyMeasure,
    kernel: &TransitionKernel,
    init: &Distribution,
) -> Result<f64> {
    let dims = kernel.dims();
    dims.ensure_eq(&mu.dims(), "occupancy vs kernel")?;
    dims.ensure_pairs(init.len(), "initial distribution")?;
    let xs = dims.num_states;
    let mut residual = mu.initial().l1_distance(init);
    let mut inflow = vec![0.0; xs];
    for n in 1..=dims.horizon {
        inflow.iter_mut().for_each(|v| *v = 0.0);
        let step = kernel.step(n);
        for (pair, &m) in mu.slice(n - 1).mass().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (acc, &p) in inflow.iter_mut().zip(&step[pair * xs..(pair + 1) * xs]) {
                *acc += m * p;
            }
        }
        let marginal = mu.slice(n).state_marginal(dims.num_actions);
        for (a, b) in marginal.iter().zip(&inflow) {
            residual = residual.max((a - b).abs());
        }
    }
    Ok(residual)
}

/// Inverse-CDF draw from a probability row using one uniform variate.
#[inline]
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Draws a state-action pair from a distribution over flattened pairs.
pub fn sample_pair<R: Rng + ?Sized>(
    dims: SpaceDims,
    dist: &Distribution,
    rng: &mut R,
) -> (usize, usize) {
    dims.split_pair(sample_index(dist.mass(), rng))
}

/// Samples one episode of `policy` under `kernel` starting at `start`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    policy: &Policy,
    kernel: &TransitionKernel,
    start: (usize, usize),
    rng: &mut R,
) -> Result<Trajectory> {
    ensure_kernel_policy(policy, kernel)?;
    let dims = kernel.dims();
    if start.0 >= dims.num_states || start.1 >= dims.num_actions {
        return Err(Error::Config(format!(
            "start pair {start:?} outside the state-action space"
        )));
    }
    let mut steps = Vec::with_capacity(dims.horizon + 1);
    steps.push(start);
    let (mut x, mut a) = start;
    for n in 1..=dims.horizon {
        x = sample_index(kernel.row(n, x, a), rng);
        a = sample_index(policy.row(n, x), rng);
        steps.push((x, a));
    }
    Ok(Trajectory { steps })
}
