//! Per-episode constrained mirror-descent step.
//!
//! The step minimizes `<l - b_bar, mu> + (1/eta) D(mu, mu_prev)` over the flow
//! polytope of the estimated kernel subject to the terminal budget
//! `||mu_N - rho||_1 <= <mu, b> + alpha_bar ||init - rho||_1`. The budget is
//! dualized: for a fixed multiplier the minimizer is obtained by a backward
//! soft-Bellman recursion whose policy update has a closed form, and the
//! multiplier is raised by projected gradient ascent until the budget holds.
//!
//! The inner product `<mu, b>` runs over steps `0..N-1` (the bonus tensor has
//! no step-`N` entry) and the adjusted loss at step `N` carries no bonus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::BonusSchedule;
use crate::mdp::{
    forward_rollout, policy_from_occupancy, Distribution, OccupancyMeasure, Policy, SpaceDims,
    SparseKernel, TransitionKernel,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BregmanKind {
    /// Slice-wise KL divergence between occupancy measures.
    KlOccupancy,
    /// Occupancy-weighted policy KL plus KL of the initial distributions.
    #[default]
    PolicyGamma,
}

/// Per-step values indexed `[n][x][a]` for `n = 0..=N` (slice 0 is unused
/// by losses but kept so indices line up with occupancy measures).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageValues {
    dims: SpaceDims,
    values: Vec<f64>,
}

impl StageValues {
    pub fn zeros(dims: SpaceDims) -> Self {
        Self {
            dims,
            values: vec![0.0; (dims.horizon + 1) * dims.pairs()],
        }
    }

    pub fn new(dims: SpaceDims, values: Vec<f64>) -> Result<Self> {
        let expected = (dims.horizon + 1) * dims.pairs();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "stage values",
                expected,
                actual: values.len(),
            });
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> SpaceDims {
        self.dims
    }

    #[inline]
    pub fn slice(&self, n: usize) -> &[f64] {
        let len = self.dims.pairs();
        &self.values[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn slice_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.dims.pairs();
        &mut self.values[n * len..(n + 1) * len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// How the terminal distribution is handled by the step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalMode {
    /// Budget constraint enforced by dual ascent.
    Constrained,
    /// No constraint; a fixed terminal cost `weight * ||mu_N - rho||_1`.
    Penalty(f64),
}

/// Serialized as a number or the string `"auto"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaBar {
    Fixed(f64),
    /// Smallest feasible value of the grid `1 - 2^-k`, `k = 1..=10`.
    Search,
}

impl Serialize for AlphaBar {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            AlphaBar::Fixed(a) => s.serialize_f64(a),
            AlphaBar::Search => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for AlphaBar {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = AlphaBar;

            fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str("a number or \"auto\"")
            }

            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<AlphaBar, E> {
                Ok(AlphaBar::Fixed(v))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<AlphaBar, E> {
                Ok(AlphaBar::Fixed(v as f64))
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<AlphaBar, E> {
                Ok(AlphaBar::Fixed(v as f64))
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<AlphaBar, E> {
                match v {
                    "auto" => Ok(AlphaBar::Search),
                    _ => Err(E::invalid_value(serde::de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(Visitor)
    }
}

/// Largest contraction value probed by [`feasibility_alpha_search`].
pub const ALPHA_GRID_CAP: f64 = 1.0 - 1.0 / 1024.0;

/// The grid `1/2, 3/4, 7/8, ...` up to [`ALPHA_GRID_CAP`].
pub fn alpha_grid() -> impl Iterator<Item = f64> {
    (1..=10).map(|k| 1.0 - 0.5f64.powi(k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeProblem {
    /// Loss gradient `l_t`, slices `1..=N` used.
    pub gradient: StageValues,
    pub bonuses: BonusSchedule,
    /// Previous policy; the step stays close to it.
    pub prior_policy: Policy,
    /// Kernel the step plans with.
    pub kernel: TransitionKernel,
    /// Initial distribution the step plans from.
    pub init: Distribution,
    /// Target terminal distribution `rho`.
    pub target: Distribution,
    pub eta: f64,
    pub alpha_bar: AlphaBar,
    pub terminal: TerminalMode,
    pub bregman: BregmanKind,
}

impl EpisodeProblem {
    pub fn dims(&self) -> SpaceDims {
        self.kernel.dims()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        dims.ensure_eq(&self.gradient.dims(), "gradient vs kernel")?;
        dims.ensure_eq(&self.bonuses.dims(), "bonuses vs kernel")?;
        dims.ensure_eq(&self.prior_policy.dims(), "prior policy vs kernel")?;
        dims.ensure_pairs(self.init.len(), "initial distribution")?;
        dims.ensure_pairs(self.target.len(), "target distribution")?;
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be non-negative, got {}", self.eta)));
        }
        if let AlphaBar::Fixed(a) = self.alpha_bar {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Config(format!("alpha_bar must lie in [0, 1), got {a}")));
            }
        }
        if let TerminalMode::Penalty(w) = self.terminal {
            if !(w >= 0.0) {
                return Err(Error::Config(format!("terminal penalty must be non-negative, got {w}")));
            }
        }
        if !self.gradient.is_finite() {
            return Err(Error::Domain("loss gradient has non-finite entries".into()));
        }
        if self.bregman != BregmanKind::PolicyGamma {
            return Err(Error::Config(
                "the closed-form step is only available for the policy_gamma divergence".into(),
            ));
        }
        Ok(())
    }

    fn fixed_alpha(&self) -> Result<f64> {
        match self.alpha_bar {
            AlphaBar::Fixed(a) => Ok(a),
            AlphaBar::Search => Err(Error::Config(
                "alpha_bar must be resolved before running dual ascent".into(),
            )),
        }
    }

    fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha_bar: AlphaBar::Fixed(alpha),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualState {
    pub lambda: f64,
    pub eta_lambda: f64,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for DualState {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            eta_lambda: 0.01,
            epsilon: 1e-3,
            max_iters: 5000,
        }
    }
}

impl DualState {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.eta_lambda > 0.0) || !(self.epsilon > 0.0) || self.max_iters == 0 {
            return Err(Error::Config(
                "dual step, tolerance and iteration budget must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Soft state-action values `Q^lambda_n`, `n = 1..=N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    dims: SpaceDims,
    values: Vec<f64>,
}

impl QTable {
    #[inline]
    pub fn slice(&self, n: usize) -> &[f64] {
        let len = self.dims.pairs();
        &self.values[(n - 1) * len..n * len]
    }

    #[inline]
    pub fn row(&self, n: usize, state: usize) -> &[f64] {
        let a = self.dims.num_actions;
        &self.slice(n)[state * a..(state + 1) * a]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `Q^lambda_N(x, a) = l^lambda_N(x, a) + 2 lambda (1 - rho(x, a))`.
pub fn terminal_q(lambda: f64, adjusted_loss: &[f64], target: &Distribution) -> Vec<f64> {
    adjusted_loss
        .iter()
        .zip(target.mass())
        .map(|(l, r)| l + 2.0 * lambda * (1.0 - r))
        .collect()
}

/// Closed-form KL-prox update of one state's action row.
///
/// Writes `pi(a) ∝ prior(a) exp(-eta q(a))` into `out` and returns the
/// optimal value `min_pi <pi, q> + (1/eta) KL(pi, prior)`.
#[inline]
pub(crate) fn soft_update(prior: &[f64], q: &[f64], eta: f64, out: &mut [f64]) -> f64 {
    if eta == 0.0 {
        out.copy_from_slice(prior);
        return prior.iter().zip(q).map(|(p, v)| p * v).sum();
    }
    if eta == f64::INFINITY {
        // Greedy limit: first minimizer on the prior's support.
        let mut best = None;
        for (i, (&v, &p)) in q.iter().zip(prior).enumerate() {
            if p > 0.0 && best.map_or(true, |(_, b)| v < b) {
                best = Some((i, v));
            }
        }
        out.fill(0.0);
        let (i, v) = best.expect("prior row has support");
        out[i] = 1.0;
        return v;
    }
    let mut q_min = f64::INFINITY;
    for (&v, &p) in q.iter().zip(prior) {
        if p > 0.0 {
            q_min = q_min.min(v);
        }
    }
    let mut z = 0.0;
    for ((o, &p), &v) in out.iter_mut().zip(prior).zip(q) {
        *o = if p > 0.0 { p * (-eta * (v - q_min)).exp() } else { 0.0 };
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
    // sum_a pi(a) [ (1/eta) log(pi(a)/prior(a)) + q(a) ] collapses to this.
    q_min - z.ln() / eta
}

/// Minimizer of the Lagrangian at a fixed multiplier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagrangianSolution {
    pub q: QTable,
    pub policy: Policy,
    pub occupancy: OccupancyMeasure,
}

fn backward_pass(
    problem: &EpisodeProblem,
    sparse: &SparseKernel,
    eta: f64,
    slack_weight: f64,
    terminal_weight: f64,
) -> Result<LagrangianSolution> {
    let mut out = LagrangianSolution::zeros(problem.dims());
    backward_pass_into(problem, sparse, eta, slack_weight, terminal_weight, &mut out, &mut Vec::new())?;
    Ok(out)
}

/// [`backward_pass`] writing into `out`, whose dimensions must match;
/// `scratch` is reused between calls.
fn backward_pass_into(
    problem: &EpisodeProblem,
    sparse: &SparseKernel,
    eta: f64,
    slack_weight: f64,
    terminal_weight: f64,
    out: &mut LagrangianSolution,
    scratch: &mut Vec<f64>,
) -> Result<()> {
    let dims = problem.dims();
    let (xs, na, horizon) = (dims.num_states, dims.num_actions, dims.horizon);
    let pairs = dims.pairs();
    let q_values = &mut out.q.values;
    let policy = out.policy.probs_mut();

    let terminal = problem.gradient.slice(horizon);
    for ((q, &l), &r) in q_values[(horizon - 1) * pairs..]
        .iter_mut()
        .zip(terminal)
        .zip(problem.target.mass())
    {
        *q = l + 2.0 * terminal_weight * (1.0 - r);
    }

    scratch.resize(xs, 0.0);
    let value_next = scratch;
    for n in (1..=horizon).rev() {
        // Policy of step n from Q_n, and the soft value V_n(x).
        let step = (n - 1) * pairs..n * pairs;
        let rows = q_values[step.clone()]
            .chunks_exact(na)
            .zip(problem.prior_policy.as_slice()[step.clone()].chunks_exact(na))
            .zip(policy[step].chunks_exact_mut(na));
        for (v, ((q, prior), pi)) in value_next.iter_mut().zip(rows) {
            *v = soft_update(prior, q, eta, pi);
        }
        if n == 1 {
            break;
        }
        // Q_{n-1}(x, a) = l_{n-1}(x, a) + sum_{x'} p_n(x' | x, a) V_n(x'),
        // with the bonuses folded into l.
        let loss = problem.gradient.slice(n - 1);
        let b_bar = problem.bonuses.gradient_at(n - 1);
        let b = problem.bonuses.slack_at(n - 1);
        let q_prev = &mut q_values[(n - 2) * pairs..(n - 1) * pairs];
        for (q, ((l, bb), s)) in q_prev.iter_mut().zip(loss.iter().zip(b_bar).zip(b)) {
            *q = l - bb - slack_weight * s;
        }
        sparse.add_expectations(n, value_next, q_prev);
    }

    sparse.rollout_into(&out.policy, &problem.init, &mut out.occupancy, value_next)
}

impl LagrangianSolution {
    fn zeros(dims: SpaceDims) -> Self {
        Self {
            q: QTable {
                dims,
                values: vec![0.0; dims.horizon * dims.pairs()],
            },
            policy: Policy::from_raw(dims, vec![0.0; dims.horizon * dims.pairs()]),
            occupancy: OccupancyMeasure::zeros(dims),
        }
    }
}

/// Backward soft-Bellman recursion and closed-form policy for multiplier
/// `lambda`, followed by the forward rollout of the resulting policy.
///
/// The terminal cost is `2 lambda (1 - <mu_N, rho>)`, which equals
/// `lambda ||mu_N - rho||_1` whenever `rho` is a point mass and bounds it
/// from above otherwise.
pub fn backward_q_and_policy(problem: &EpisodeProblem, lambda: f64) -> Result<LagrangianSolution> {
    problem.validate()?;
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let sparse = SparseKernel::new(&problem.kernel);
    match problem.terminal {
        TerminalMode::Constrained => backward_pass(problem, &sparse, problem.eta, lambda, lambda),
        TerminalMode::Penalty(w) => backward_pass(problem, &sparse, problem.eta, 0.0, w),
    }
}

/// Deterministic minimizer of `<l, mu> + 2 w (1 - <mu_N, rho>)` over the
/// policies supported by `problem.prior_policy`; bonuses enter as in the
/// Lagrangian with zero slack weight and `eta` is ignored.
pub fn greedy_response(
    problem: &EpisodeProblem,
    sparse: &SparseKernel,
    terminal_weight: f64,
) -> Result<LagrangianSolution> {
    problem.validate()?;
    problem.dims().ensure_eq(&sparse.dims(), "sparse kernel")?;
    if !(terminal_weight >= 0.0) {
        return Err(Error::Config(format!(
            "terminal weight must be non-negative, got {terminal_weight}"
        )));
    }
    backward_pass(problem, sparse, f64::INFINITY, 0.0, terminal_weight)
}

/// `G(mu) = ||mu_N - rho||_1 - sum_{n<N} <mu_n, b_n> - alpha_bar ||ref_init - rho||_1`.
pub fn constraint_value(
    mu: &OccupancyMeasure,
    target: &Distribution,
    bonuses: &BonusSchedule,
    alpha_bar: f64,
    ref_init: &Distribution,
) -> f64 {
    mu.terminal().l1_distance(target)
        - bonuses.slack_inner(mu.slices())
        - alpha_bar * ref_init.l1_distance(target)
}

/// Lagrangian of the step at multiplier `lambda` evaluated at `policy`,
/// with the exact `||mu_N - rho||_1` terminal term.
pub fn lagrangian_value(problem: &EpisodeProblem, policy: &Policy, lambda: f64) -> Result<f64> {
    let alpha = problem.fixed_alpha().unwrap_or(0.0);
    let mu = forward_rollout(policy, &problem.init, &problem.kernel)?;
    let dims = problem.dims();
    let mut linear = 0.0;
    for n in 0..=dims.horizon {
        let slice = mu.slice(n).mass();
        let loss = problem.gradient.slice(n);
        for (i, &m) in slice.iter().enumerate() {
            if n >= 1 {
                linear += m * loss[i];
            }
            if n < dims.horizon {
                linear -= m * problem.bonuses.gradient_at(n)[i];
            }
        }
    }
    let divergence = if problem.eta == 0.0 {
        0.0
    } else {
        gamma_divergence(&mu, policy, &problem.prior_policy, &problem.init, &problem.init)?
            / problem.eta
    };
    let penalty = match problem.terminal {
        TerminalMode::Constrained => {
            lambda * constraint_value(&mu, &problem.target, &problem.bonuses, alpha, &problem.init)
        }
        TerminalMode::Penalty(w) => w * mu.terminal().l1_distance(&problem.target),
    };
    Ok(linear + divergence + penalty)
}

fn xlogy_ratio(x: f64, y: f64, floor: f64) -> Result<f64> {
    if x == 0.0 {
        return Ok(0.0);
    }
    let y = if y > 0.0 {
        y
    } else if floor > 0.0 {
        floor
    } else {
        return Err(Error::Domain(format!(
            "reference has zero mass where the argument has mass {x}"
        )));
    };
    Ok(x * (x / y).ln())
}

fn gamma_divergence(
    mu: &OccupancyMeasure,
    policy: &Policy,
    reference_policy: &Policy,
    init: &Distribution,
    reference_init: &Distribution,
) -> Result<f64> {
    gamma_divergence_floored(mu, policy, reference_policy, init, reference_init, 0.0)
}

fn gamma_divergence_floored(
    mu: &OccupancyMeasure,
    policy: &Policy,
    reference_policy: &Policy,
    init: &Distribution,
    reference_init: &Distribution,
    floor: f64,
) -> Result<f64> {
    let dims = mu.dims();
    let mut total = 0.0;
    for n in 1..=dims.horizon {
        let slice = mu.slice(n).mass();
        for x in 0..dims.num_states {
            let pi = policy.row(n, x);
            let pr = reference_policy.row(n, x);
            for a in 0..dims.num_actions {
                let m = slice[dims.pair(x, a)];
                if m == 0.0 || pi[a] == 0.0 {
                    continue;
                }
                // m * log(pi / pi') expressed through the ratio helper.
                total += m * xlogy_ratio(pi[a], pr[a], floor)? / pi[a];
            }
        }
    }
    for (&r, &rr) in init.mass().iter().zip(reference_init.mass()) {
        total += xlogy_ratio(r, rr, floor)?;
    }
    Ok(total)
}

/// Bregman divergence `D(mu, reference)`.
///
/// For [`BregmanKind::PolicyGamma`] the policies are extracted from the
/// occupancy measures unless `reference_policy` is supplied. Zero reference
/// entries facing positive mass are replaced by `floor` when it is positive
/// and rejected otherwise.
pub fn bregman_divergence(
    kind: BregmanKind,
    mu: &OccupancyMeasure,
    reference: &OccupancyMeasure,
    reference_policy: Option<&Policy>,
    floor: f64,
) -> Result<f64> {
    mu.dims().ensure_eq(&reference.dims(), "bregman arguments")?;
    match kind {
        BregmanKind::KlOccupancy => {
            let mut total = 0.0;
            for (s, r) in mu.slices().iter().zip(reference.slices()) {
                for (&m, &mr) in s.mass().iter().zip(r.mass()) {
                    total += xlogy_ratio(m, mr, floor)?;
                }
            }
            Ok(total)
        }
        BregmanKind::PolicyGamma => {
            let policy = policy_from_occupancy(mu);
            let extracted;
            let reference_policy = match reference_policy {
                Some(p) => p,
                None => {
                    extracted = policy_from_occupancy(reference);
                    &extracted
                }
            };
            gamma_divergence_floored(
                mu,
                &policy,
                reference_policy,
                mu.initial(),
                reference.initial(),
                floor,
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualOutcome {
    pub solution: LagrangianSolution,
    pub lambda: f64,
    pub iterations: usize,
    pub g: f64,
}

/// Projected dual ascent on the terminal budget multiplier.
pub fn dual_ascent(problem: &EpisodeProblem, dual: &DualState) -> Result<DualOutcome> {
    let (outcome, converged) = dual_ascent_capped(problem, dual)?;
    if converged {
        Ok(outcome)
    } else {
        Err(Error::DualAscent {
            iterations: dual.max_iters,
            last_g: outcome.g,
            lambda: outcome.lambda + dual.eta_lambda * outcome.g,
        })
    }
}

/// Dual ascent that, when the budget runs out, hands back the last iterate
/// instead of failing. The flag tells whether `G <= epsilon` was reached.
pub fn dual_ascent_capped(problem: &EpisodeProblem, dual: &DualState) -> Result<(DualOutcome, bool)> {
    problem.validate()?;
    dual.validate()?;
    let alpha = problem.fixed_alpha()?;
    let sparse = SparseKernel::new(&problem.kernel);
    let mut solution = LagrangianSolution::zeros(problem.dims());
    let mut scratch = Vec::new();
    let mut lambda = dual.lambda;
    for iteration in 1..=dual.max_iters {
        backward_pass_into(problem, &sparse, problem.eta, lambda, lambda, &mut solution, &mut scratch)?;
        let g = constraint_value(&solution.occupancy, &problem.target, &problem.bonuses, alpha, &problem.init);
        if !g.is_finite() || !solution.q.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite values in dual ascent at lambda = {lambda}"
            )));
        }
        let done = g <= dual.epsilon;
        if done || iteration == dual.max_iters {
            return Ok((
                DualOutcome {
                    solution,
                    lambda,
                    iterations: iteration,
                    g,
                },
                done,
            ));
        }
        lambda += dual.eta_lambda * g;
    }
    unreachable!("max_iters is positive")
}

/// Smallest multiplier (up to relative `rel_tol`) whose Lagrangian minimizer
/// satisfies `G <= epsilon`, found by doubling then bisection. Relies on `G`
/// being non-increasing in the multiplier, which holds for exact minimizers.
pub fn dual_bisection(
    problem: &EpisodeProblem,
    epsilon: f64,
    rel_tol: f64,
    max_evals: usize,
) -> Result<DualOutcome> {
    problem.validate()?;
    if !(epsilon > 0.0 && rel_tol > 0.0) {
        return Err(Error::Config(
            "bisection needs positive epsilon and rel_tol".into(),
        ));
    }
    let alpha = problem.fixed_alpha()?;
    let sparse = SparseKernel::new(&problem.kernel);
    let evals = std::cell::Cell::new(0usize);
    let eval = |lambda: f64| -> Result<(LagrangianSolution, f64)> {
        evals.set(evals.get() + 1);
        let solution = backward_pass(problem, &sparse, problem.eta, lambda, lambda)?;
        let g = constraint_value(
            &solution.occupancy,
            &problem.target,
            &problem.bonuses,
            alpha,
            &problem.init,
        );
        if !g.is_finite() || !solution.q.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite values in bisection at lambda = {lambda}"
            )));
        }
        Ok((solution, g))
    };
    let (solution, g) = eval(0.0)?;
    if g <= epsilon {
        return Ok(DualOutcome { solution, lambda: 0.0, iterations: 1, g });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = loop {
        let (solution, g) = eval(hi)?;
        if g <= epsilon {
            break (solution, g);
        }
        if evals.get() >= max_evals {
            return Err(Error::DualAscent { iterations: evals.get(), last_g: g, lambda: hi });
        }
        lo = hi;
        hi *= 2.0;
    };
    while hi - lo > rel_tol * hi && evals.get() < max_evals {
        let mid = 0.5 * (lo + hi);
        let (solution, g) = eval(mid)?;
        if g <= epsilon {
            hi = mid;
            best = (solution, g);
        } else {
            lo = mid;
        }
    }
    Ok(DualOutcome { solution: best.0, lambda: hi, iterations: evals.get(), g: best.1 })
}

/// Returns the first grid value of `alpha_bar` for which dual ascent
/// reaches the budget, together with that run.
pub fn feasibility_alpha_search(
    problem: &EpisodeProblem,
    dual: &DualState,
) -> Result<(f64, DualOutcome)> {
    let mut last_g = f64::NAN;
    for alpha in alpha_grid() {
        match dual_ascent(&problem.with_alpha(alpha), dual) {
            Ok(outcome) => return Ok((alpha, outcome)),
            Err(Error::DualAscent { last_g: g, .. }) => last_g = g,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Infeasible {
        cap: ALPHA_GRID_CAP,
        last_g,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualDiagnostics {
    pub lambda_final: f64,
    pub dual_iters: usize,
    pub g_final: f64,
    pub alpha_bar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSolution {
    pub policy: Policy,
    pub occupancy: OccupancyMeasure,
    pub diagnostics: DualDiagnostics,
}

/// One mirror-descent step: optional `alpha_bar` search, then dual ascent
/// (or a single pass when the terminal term is a fixed penalty).
pub fn solve_episode(problem: &EpisodeProblem, dual: &DualState) -> Result<EpisodeSolution> {
    solve_episode_with(problem, dual, false)
}

/// As [`solve_episode`], but with a fixed `alpha_bar` an exhausted dual
/// budget yields the last iterate, whose `g_final` then exceeds `epsilon`.
pub fn solve_episode_capped(problem: &EpisodeProblem, dual: &DualState) -> Result<EpisodeSolution> {
    solve_episode_with(problem, dual, true)
}

fn solve_episode_with(problem: &EpisodeProblem, dual: &DualState, capped: bool) -> Result<EpisodeSolution> {
    problem.validate()?;
    dual.validate()?;
    match problem.terminal {
        TerminalMode::Penalty(w) => {
            let alpha = problem.fixed_alpha().unwrap_or(0.0);
            let solution = backward_pass(problem, &SparseKernel::new(&problem.kernel), problem.eta, 0.0, w)?;
            let g = constraint_value(
                &solution.occupancy,
                &problem.target,
                &problem.bonuses,
                alpha,
                &problem.init,
            );
            Ok(EpisodeSolution {
                policy: solution.policy,
                occupancy: solution.occupancy,
                diagnostics: DualDiagnostics {
                    lambda_final: w,
                    dual_iters: 1,
                    g_final: g,
                    alpha_bar: alpha,
                },
            })
        }
        TerminalMode::Constrained => {
            let (alpha, outcome) = match problem.alpha_bar {
                AlphaBar::Fixed(a) if capped => (a, dual_ascent_capped(problem, dual)?.0),
                AlphaBar::Fixed(a) => (a, dual_ascent(problem, dual)?),
                AlphaBar::Search => feasibility_alpha_search(problem, dual)?,
            };
            Ok(EpisodeSolution {
                policy: outcome.solution.policy,
                occupancy: outcome.solution.occupancy,
                diagnostics: DualDiagnostics {
                    lambda_final: outcome.lambda,
                    dual_iters: outcome.iterations,
                    g_final: outcome.g,
                    alpha_bar: alpha,
                },
            })
        }
    }
}
