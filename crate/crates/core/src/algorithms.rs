//! Reset-free multi-agent protocol, periodic regret and the offline
//! periodic comparator.
//!
//! Agents are simulated in the mean-field limit by default: the population's
//! episode-start distribution `rho_t` is propagated exactly and the single
//! trajectory observed per episode is drawn with a fresh start from `rho_t`.
//! A finite population of explicit walkers is available through
//! [`AgentMode::Finite`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::environments::{loss_gradient, total_loss, Objective};
use crate::error::{Error, Result};
use crate::estimation::{bonus_schedule, propagate_rho_tilde, BonusSchedule, VisitCounters};
use crate::mdp::{
    forward_rollout, policy_from_occupancy, sample_index, sample_pair, sample_trajectory, Distribution,
    OccupancyMeasure, Policy, SpaceDims, SparseKernel, TransitionKernel, Trajectory,
};
use crate::solver::{
    dual_bisection, greedy_response, solve_episode, solve_episode_capped, AlphaBar, BregmanKind, DualDiagnostics, DualState, EpisodeProblem,
    StageValues, TerminalMode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    KnownRho,
    UnknownRho,
    EpisodicBaseline,
}

impl Framework {
    pub fn short_name(self) -> &'static str {
        match self {
            Framework::KnownRho => "k",
            Framework::UnknownRho => "u",
            Framework::EpisodicBaseline => "baseline",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Framework::KnownRho => "MDPP-K",
            Framework::UnknownRho => "MDPP-U",
            Framework::EpisodicBaseline => "episodic baseline",
        }
    }
}

impl std::str::FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" | "known_rho" => Ok(Framework::KnownRho),
            "u" | "unknown_rho" => Ok(Framework::UnknownRho),
            "baseline" | "episodic_baseline" => Ok(Framework::EpisodicBaseline),
            other => Err(Error::Config(format!("unknown framework {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    #[default]
    MeanField,
    Finite,
}

/// Which start-distribution gap episode `t` is charged in the regret.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyIndex {
    /// `||rho_t - rho||_1`, so the first episode contributes zero.
    #[default]
    Current,
    /// `||rho_{t+1} - rho||_1`.
    Next,
}

/// What an episode does when dual ascent exhausts its iteration budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualOverrun {
    /// Abort the run.
    #[default]
    Abort,
    /// Play the last iterate and carry its multiplier into the next episode.
    PlayLast,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparatorConfig {
    /// Bound on `||mu_N - rho||_1` for the comparator.
    pub budget: f64,
    /// Mirror-descent step of the warm-up phase.
    pub eta: f64,
    /// Occupancy step (sup over slices of L1) that ends the warm-up.
    pub tol: f64,
    pub warmup_iters: usize,
    /// Frank-Wolfe gap, relative to `max(1, |F|)`, at which the comparator
    /// counts as optimal. The gap bounds the suboptimality.
    pub gap_tol: f64,
    pub max_iters: usize,
}

impl Default for ComparatorConfig {
    fn default() -> Self {
        Self {
            budget: 1e-3,
            eta: 0.1,
            tol: 1e-3,
            warmup_iters: 500,
            gap_tol: 1e-3,
            max_iters: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub num_episodes: usize,
    pub num_agents: usize,
    pub framework: Framework,
    pub eta: f64,
    pub dual: DualState,
    pub alpha_bar: AlphaBar,
    pub delta: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Weight of the uniform policy mixed into every update.
    pub mix_rate: f64,
    /// Multiplier applied to both bonus tensors.
    pub bonus_scale: f64,
    pub agent_mode: AgentMode,
    pub penalty_index: PenaltyIndex,
    pub dual_overrun: DualOverrun,
    /// Agent restarted from `rho_tilde` under [`Framework::UnknownRho`];
    /// defaults to the last one.
    pub restarted_agent: Option<usize>,
    pub comparator: ComparatorConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            num_episodes: 1000,
            num_agents: 100,
            framework: Framework::KnownRho,
            eta: 0.01,
            dual: DualState::default(),
            alpha_bar: AlphaBar::Fixed(0.1),
            delta: 0.1,
            gamma: 1000.0,
            seed: 0,
            mix_rate: 1e-6,
            bonus_scale: 1.0,
            agent_mode: AgentMode::MeanField,
            penalty_index: PenaltyIndex::Current,
            dual_overrun: DualOverrun::Abort,
            restarted_agent: None,
            comparator: ComparatorConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_episodes == 0 {
            return Err(Error::Config("num_episodes must be positive".into()));
        }
        if self.framework != Framework::EpisodicBaseline && self.num_agents < 2 {
            return Err(Error::Config(format!(
                "num_agents must be at least 2 for {}, got {}",
                self.framework.label(),
                self.num_agents
            )));
        }
        if self.num_agents == 0 {
            return Err(Error::Config("num_agents must be positive".into()));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        self.dual.validate()?;
        if let AlphaBar::Fixed(a) = self.alpha_bar {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Config(format!("alpha_bar must lie in [0, 1), got {a}")));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.mix_rate) {
            return Err(Error::Config(format!("mix_rate must lie in [0, 1], got {}", self.mix_rate)));
        }
        if !(self.bonus_scale >= 0.0) {
            return Err(Error::Config(format!(
                "bonus_scale must be non-negative, got {}",
                self.bonus_scale
            )));
        }
        if let Some(r) = self.restarted_agent {
            if r >= self.num_agents {
                return Err(Error::Config(format!(
                    "restarted_agent {r} out of range for {} agents",
                    self.num_agents
                )));
            }
        }
        let c = &self.comparator;
        if !(c.budget > 0.0 && c.eta > 0.0 && c.tol > 0.0 && c.gap_tol > 0.0) || c.max_iters == 0 {
            return Err(Error::Config(
                "comparator budget, eta, tolerances and max_iters must be positive".into(),
            ));
        }
        Ok(())
    }

    fn restarted(&self) -> usize {
        self.restarted_agent.unwrap_or(self.num_agents - 1)
    }
}

/// Test and diagnostic hooks that replace learned quantities.
#[derive(Clone, Debug, Default)]
pub struct ProtocolOverrides {
    /// Kernel the learner plans with instead of its estimate.
    pub planning_kernel: Option<TransitionKernel>,
    /// Kernel used to propagate `rho_tilde` instead of the restarted agent's estimate.
    pub tilde_kernel: Option<TransitionKernel>,
    pub zero_bonuses: bool,
    pub initial_policy: Option<Policy>,
    /// Comparator used instead of solving the offline problem.
    pub comparator: Option<Comparator>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub loss: f64,
    pub comparator_loss: f64,
    /// `||rho_t - rho||_1`.
    pub rho_gap: f64,
    /// `||rho_{t+1} - rho||_1`.
    pub rho_gap_next: f64,
    /// `||rho_tilde_t - rho_t||_1`, only under [`Framework::UnknownRho`].
    pub rho_tilde_gap: Option<f64>,
    pub regret_cum: f64,
    pub diagnostics: DualDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    pub gamma: f64,
    pub penalty_index: PenaltyIndex,
    pub records: Vec<EpisodeRecord>,
}

impl RegretLedger {
    pub fn final_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.regret_cum)
    }

    /// Largest difference between stored and recomputed cumulative regret.
    pub fn recomputation_error(&self) -> f64 {
        periodic_regret(&self.records, self.gamma, self.penalty_index)
            .iter()
            .zip(&self.records)
            .map(|(a, r)| (a - r.regret_cum).abs())
            .fold(0.0, f64::max)
    }

    /// Mean `rho_gap` over the last tenth of the episodes (at least one).
    pub fn last_decile_rho_gap(&self) -> f64 {
        last_decile_mean(self.records.iter().map(|r| r.rho_gap).collect::<Vec<_>>().as_slice())
    }
}

pub fn last_decile_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let k = (values.len() / 10).max(1);
    values[values.len() - k..].iter().sum::<f64>() / k as f64
}

/// Cumulative periodic regret after each episode.
pub fn periodic_regret(records: &[EpisodeRecord], gamma: f64, index: PenaltyIndex) -> Vec<f64> {
    let mut acc = 0.0;
    records
        .iter()
        .map(|r| {
            let gap = match index {
                PenaltyIndex::Current => r.rho_gap,
                PenaltyIndex::Next => r.rho_gap_next,
            };
            acc += r.loss - r.comparator_loss + gamma * gap;
            acc
        })
        .collect()
}

/// Least-squares slope of `log R_t` against `log t` over the second half of
/// the episodes. Non-positive regret values are skipped.
pub fn loglog_slope(regret: &[f64]) -> f64 {
    let start = regret.len() / 2;
    let pts: Vec<(f64, f64)> = regret
        .iter()
        .enumerate()
        .skip(start)
        .filter(|(_, &r)| r > 0.0)
        .map(|(i, &r)| (((i + 1) as f64).ln(), r.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Offline optimal periodic policy under the true dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparator {
    pub policy: Policy,
    pub occupancy: OccupancyMeasure,
    pub iterations: usize,
    /// `||rho P_pi - rho||_1` of the returned policy.
    pub defect: f64,
    /// Final Frank-Wolfe gap, which bounds the suboptimality of `occupancy`.
    /// Only certified when `rho` is a point mass.
    pub gap: Option<f64>,
}

/// Minimizes the episode-averaged objective over occupancy measures started
/// at `rho` whose last slice is within `config.budget` of `rho` in L1.
///
/// With noisy moves and a point-mass `rho`, only policies that never leave
/// the start return surely, so the budget is what makes the problem
/// non-trivial. The budget is imposed through `2 (1 - <mu_N, rho>)`, which is
/// the L1 distance for a point mass and an upper bound otherwise.
///
/// A mirror-descent warm-up (the learner's step with the true kernel, no
/// bonuses and the multiplier set by bisection) is followed by Frank-Wolfe
/// with exact line search, whose gap certifies the result. The warm-up does
/// well on curved objectives where Frank-Wolfe crawls, and Frank-Wolfe leaves
/// the corner the warm-up can lock into on nearly linear ones. The linear step is a one-constraint
/// linear program, solved exactly by bisecting the terminal multiplier of a
/// deterministic dynamic program and mixing the two bracketing vertices. A
/// convex combination of occupancies from the same start is the occupancy
/// of the policy it induces, so iterates stay realizable.
///
/// With per-episode objectives the gradient is averaged over
/// `1..=num_episodes`; the returned policy is best for the average.
pub fn offline_optimal_periodic(
    kernel: &TransitionKernel,
    rho: &Distribution,
    objective: &dyn Objective,
    num_episodes: usize,
    config: &ComparatorConfig,
) -> Result<Comparator> {
    let dims = kernel.dims();
    let episodes = num_episodes.max(1);
    let average_loss = |mu: &OccupancyMeasure| -> f64 {
        if objective.is_stationary() {
            return total_loss(objective, 1, mu);
        }
        (1..=episodes).map(|t| total_loss(objective, t, mu)).sum::<f64>() / episodes as f64
    };
    let mut problem = EpisodeProblem {
        gradient: StageValues::zeros(dims),
        bonuses: BonusSchedule::zeros(dims),
        prior_policy: Policy::uniform(dims),
        kernel: kernel.clone(),
        init: rho.clone(),
        target: rho.clone(),
        eta: 1.0,
        alpha_bar: AlphaBar::Fixed(0.0),
        terminal: TerminalMode::Constrained,
        bregman: BregmanKind::PolicyGamma,
    };

    let mut policy = Policy::uniform(dims);
    let mut mu = forward_rollout(&policy, rho, kernel)?;
    if dims.num_actions == 1 {
        let defect = mu.terminal().l1_distance(rho);
        return Ok(Comparator {
            policy,
            occupancy: mu,
            iterations: 0,
            defect,
            gap: Some(0.0),
        });
    }
    problem.eta = config.eta;
    let mut last_step = f64::INFINITY;
    let mut warm_iters = 0;
    for _ in 0..config.warmup_iters {
        warm_iters += 1;
        problem.gradient = averaged_gradient(objective, episodes, &mu);
        problem.prior_policy = policy;
        let next = dual_bisection(&problem, config.budget, 1e-6, 200)?.solution;
        let step = next.occupancy.inf_one_distance(&mu);
        policy = next.policy;
        mu = next.occupancy;
        if step < config.tol {
            last_step = step;
            break;
        }
        if step > last_step {
            // Oscillating between corners: shorten the step.
            problem.eta *= 0.5;
        }
        last_step = step;
    }
    if !is_point_mass(rho) {
        // The linear step needs the terminal penalty to be exact.
        if last_step >= config.tol {
            return Err(Error::NonConvergence {
                iterations: warm_iters,
                last_step,
                defect: mu.terminal().l1_distance(rho),
            });
        }
        let defect = mu.terminal().l1_distance(rho);
        return Ok(Comparator {
            policy,
            occupancy: mu,
            iterations: warm_iters,
            defect,
            gap: None,
        });
    }
    problem.prior_policy = Policy::uniform(dims);
    let mut gap = f64::INFINITY;
    let mut iterations_done = 0;
    for iteration in 1..=config.max_iters {
        iterations_done = iteration;
        problem.gradient = averaged_gradient(objective, episodes, &mu);
        let s = budgeted_vertex(&problem, config.budget)?;
        gap = stage_inner(&problem.gradient, &mu) - stage_inner(&problem.gradient, &s);
        let value = average_loss(&mu);
        if gap <= config.gap_tol * value.abs().max(1.0) {
            let policy = policy_from_occupancy(&mu);
            let defect = mu.terminal().l1_distance(rho);
            return Ok(Comparator {
                policy,
                occupancy: mu,
                iterations: warm_iters + iteration,
                defect,
                gap: Some(gap),
            });
        }
        let step = golden_section(|g| average_loss(&mix(&mu, &s, g)), 0.0, 1.0, 1e-8);
        if step == 0.0 {
            // Stalled: the gap cannot shrink further at this precision.
            break;
        }
        let mixed = mix(&mu, &s, step);
        // Re-derive from the induced policy to keep the iterate exactly realizable.
        mu = forward_rollout(&policy_from_occupancy(&mixed), rho, kernel)?;
    }
    Err(Error::NonConvergence {
        iterations: iterations_done,
        last_step: gap,
        defect: mu.terminal().l1_distance(rho),
    })
}

fn is_point_mass(rho: &Distribution) -> bool {
    rho.mass().iter().any(|&m| m == 1.0)
}

fn return_defect(mu: &OccupancyMeasure, rho: &Distribution) -> f64 {
    let inner: f64 = mu.terminal().mass().iter().zip(rho.mass()).map(|(m, r)| m * r).sum();
    2.0 * (1.0 - inner)
}

/// Minimizer of `<gradient, mu>` subject to `return_defect(mu) <= budget`.
fn budgeted_vertex(problem: &EpisodeProblem, budget: f64) -> Result<OccupancyMeasure> {
    let sparse = SparseKernel::new(&problem.kernel);
    let at = |w: f64| -> Result<(OccupancyMeasure, f64)> {
        let mu = greedy_response(problem, &sparse, w)?.occupancy;
        let d = return_defect(&mu, &problem.target);
        Ok((mu, d))
    };
    let (free, d_free) = at(0.0)?;
    if d_free <= budget {
        return Ok(free);
    }
    // Double from the loss spread until the budget holds; the defect is
    // non-increasing in the weight.
    let (mut lo, mut lo_mu, mut d_lo) = (0.0, free, d_free);
    let mut hi = exact_penalty_weight(&problem.gradient);
    let (mut hi_mu, mut d_hi) = at(hi)?;
    while d_hi > budget {
        if hi > 1e12 {
            return Err(Error::Infeasible {
                cap: budget,
                last_g: d_hi,
            });
        }
        (lo, lo_mu, d_lo) = (hi, hi_mu, d_hi);
        hi *= 2.0;
        (hi_mu, d_hi) = at(hi)?;
    }
    for _ in 0..60 {
        if hi - lo <= 1e-9 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let (mu, d) = at(mid)?;
        if d <= budget {
            (hi, hi_mu, d_hi) = (mid, mu, d);
        } else {
            (lo, lo_mu, d_lo) = (mid, mu, d);
        }
    }
    // The optimum of a one-constraint program mixes the two vertices that
    // bracket the breakpoint so the budget binds.
    let theta = ((budget - d_hi) / (d_lo - d_hi)).clamp(0.0, 1.0);
    Ok(mix(&hi_mu, &lo_mu, theta))
}

/// Terminal weight `w` such that `2 w` exceeds the spread of any policy's
/// accumulated loss.
fn exact_penalty_weight(gradient: &StageValues) -> f64 {
    let dims = gradient.dims();
    let spread: f64 = (1..=dims.horizon)
        .map(|n| {
            let s = gradient.slice(n);
            let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .sum();
    spread + 1.0
}

fn stage_inner(values: &StageValues, mu: &OccupancyMeasure) -> f64 {
    (1..=mu.dims().horizon)
        .map(|n| {
            values
                .slice(n)
                .iter()
                .zip(mu.slice(n).mass())
                .map(|(v, m)| v * m)
                .sum::<f64>()
        })
        .sum()
}

fn mix(a: &OccupancyMeasure, b: &OccupancyMeasure, weight: f64) -> OccupancyMeasure {
    let slices = a
        .slices()
        .iter()
        .zip(b.slices())
        .map(|(x, y)| {
            let mass = x
                .mass()
                .iter()
                .zip(y.mass())
                .map(|(p, q)| (1.0 - weight) * p + weight * q)
                .collect();
            Distribution::with_tolerance(mass, 1e-9).expect("mixture of distributions")
        })
        .collect();
    OccupancyMeasure::new(a.dims(), slices).expect("same layout")
}

/// Minimizer of a unimodal `f` on `[lo, hi]`.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - ratio * (hi - lo);
    let mut d = lo + ratio * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - ratio * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + ratio * (hi - lo);
            fd = f(d);
        }
    }
    let mid = 0.5 * (lo + hi);
    // The endpoints are candidates too; golden section never evaluates them.
    [(0.0, f(0.0)), (mid, f(mid)), (1.0, f(1.0))]
        .into_iter()
        .fold((mid, f64::INFINITY), |best, (x, v)| if v < best.1 { (x, v) } else { best })
        .0
}

fn averaged_gradient(objective: &dyn Objective, episodes: usize, mu: &OccupancyMeasure) -> StageValues {
    if objective.is_stationary() {
        return loss_gradient(objective, 1, mu);
    }
    let dims = mu.dims();
    let mut acc = vec![0.0; (dims.horizon + 1) * dims.pairs()];
    for t in 1..=episodes {
        let g = loss_gradient(objective, t, mu);
        for (a, v) in acc.iter_mut().zip(g.as_slice()) {
            *a += v / episodes as f64;
        }
    }
    StageValues::new(dims, acc).expect("accumulator has stage layout")
}

/// Serializable state of a run between episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunnerState {
    /// Completed episodes.
    pub episode: usize,
    /// Policy played in the next episode.
    pub policy: Policy,
    /// Occupancy measure the learner computed for that policy.
    pub plan: OccupancyMeasure,
    /// Exact episode-start distribution of the population.
    pub rho_t: Distribution,
    pub rho_tilde: Distribution,
    pub counters: VisitCounters,
    pub tilde_counters: VisitCounters,
    pub lambda: f64,
    /// Current pair of each walker in [`AgentMode::Finite`].
    pub agents: Vec<(usize, usize)>,
    pub rng_observe: ChaCha8Rng,
    pub rng_restart: ChaCha8Rng,
    pub records: Vec<EpisodeRecord>,
}

const STREAM_OBSERVE: u64 = 1;
const STREAM_RESTART: u64 = 2;
const STREAM_AGENTS: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Episode-by-episode driver of the protocol.
pub struct Runner<'a> {
    kernel: &'a TransitionKernel,
    rho: &'a Distribution,
    objective: &'a dyn Objective,
    config: ProtocolConfig,
    overrides: ProtocolOverrides,
    comparator: Comparator,
    lipschitz: f64,
    state: RunnerState,
}

impl<'a> Runner<'a> {
    pub fn new(
        kernel: &'a TransitionKernel,
        rho: &'a Distribution,
        objective: &'a dyn Objective,
        config: ProtocolConfig,
        overrides: ProtocolOverrides,
    ) -> Result<Self> {
        config.validate()?;
        let dims = kernel.dims();
        dims.ensure_pairs(rho.len(), "target distribution")?;
        for k in [&overrides.planning_kernel, &overrides.tilde_kernel].into_iter().flatten() {
            dims.ensure_eq(&k.dims(), "override kernel")?;
        }
        let comparator = match &overrides.comparator {
            Some(c) => c.clone(),
            None => offline_optimal_periodic(
                kernel,
                rho,
                objective,
                config.num_episodes,
                &config.comparator,
            )?,
        };
        let policy = match &overrides.initial_policy {
            Some(p) => {
                dims.ensure_eq(&p.dims(), "initial policy")?;
                p.clone()
            }
            None => Policy::uniform(dims),
        };
        let counters = VisitCounters::new(dims);
        let planning = overrides
            .planning_kernel
            .clone()
            .unwrap_or_else(|| counters.empirical_kernel());
        let plan = forward_rollout(&policy, rho, &planning)?;
        let mut rng_agents = stream(config.seed, STREAM_AGENTS);
        let agents = match config.agent_mode {
            AgentMode::MeanField => Vec::new(),
            AgentMode::Finite => (0..config.num_agents)
                .map(|_| sample_pair(dims, rho, &mut rng_agents))
                .collect(),
        };
        let state = RunnerState {
            episode: 0,
            policy,
            plan,
            rho_t: rho.clone(),
            rho_tilde: rho.clone(),
            counters,
            tilde_counters: VisitCounters::new(dims),
            lambda: config.dual.lambda,
            agents,
            rng_observe: stream(config.seed, STREAM_OBSERVE),
            rng_restart: stream(config.seed, STREAM_RESTART),
            records: Vec::with_capacity(config.num_episodes),
        };
        Ok(Self {
            kernel,
            rho,
            objective,
            lipschitz: objective.lipschitz(),
            config,
            overrides,
            comparator,
            state,
        })
    }

    /// Replaces the state, e.g. from a checkpoint of the same configuration.
    pub fn resume(mut self, state: RunnerState) -> Result<Self> {
        let dims = self.kernel.dims();
        dims.ensure_eq(&state.policy.dims(), "checkpoint policy")?;
        dims.ensure_eq(&state.counters.dims(), "checkpoint counters")?;
        if state.records.len() != state.episode {
            return Err(Error::Config("checkpoint record count does not match its episode".into()));
        }
        self.state = state;
        Ok(self)
    }

    pub fn state(&self) -> &RunnerState {
        &self.state
    }

    pub fn comparator(&self) -> &Comparator {
        &self.comparator
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.state.episode >= self.config.num_episodes
    }

    fn dims(&self) -> SpaceDims {
        self.kernel.dims()
    }

    /// Runs one episode and computes the next policy.
    pub fn step(&mut self) -> Result<&EpisodeRecord> {
        let t = self.state.episode + 1;
        self.step_inner(t).map_err(|e| match e {
            e @ Error::Episode { .. } => e,
            e => e.at_episode(t),
        })?;
        Ok(self.state.records.last().expect("record pushed"))
    }

    fn step_inner(&mut self, t: usize) -> Result<()> {
        let dims = self.dims();
        let framework = self.config.framework;
        let st = &mut self.state;

        let mu_true = forward_rollout(&st.policy, &st.rho_t, self.kernel)?;
        let loss = total_loss(self.objective, t, &mu_true);
        let comparator_loss = total_loss(self.objective, t, &self.comparator.occupancy);
        let rho_gap = st.rho_t.l1_distance(self.rho);
        let rho_tilde_gap =
            (framework == Framework::UnknownRho).then(|| st.rho_tilde.l1_distance(&st.rho_t));

        let observed = match self.config.agent_mode {
            AgentMode::MeanField => {
                let start = sample_pair(dims, &st.rho_t, &mut st.rng_observe);
                sample_trajectory(&st.policy, self.kernel, start, &mut st.rng_observe)?
            }
            AgentMode::Finite => {
                let restarted = (framework == Framework::UnknownRho).then(|| self.config.restarted());
                step_walkers(&mut st.agents, &st.policy, self.kernel, restarted, &mut st.rng_observe)?
            }
        };
        st.counters.update(&observed)?;
        let rho_next = mu_true.terminal().clone();

        let mut rho_tilde_next = None;
        if framework == Framework::UnknownRho {
            let start = match self.config.agent_mode {
                AgentMode::MeanField => sample_pair(dims, &st.rho_tilde, &mut st.rng_restart),
                AgentMode::Finite => st.agents[self.config.restarted()],
            };
            let traj = sample_trajectory(&st.policy, self.kernel, start, &mut st.rng_restart)?;
            st.tilde_counters.update(&traj)?;
            let tilde_kernel = match &self.overrides.tilde_kernel {
                Some(k) => k.clone(),
                None => st.tilde_counters.empirical_kernel(),
            };
            let next = propagate_rho_tilde(&st.rho_tilde, &st.policy, &tilde_kernel)?;
            if self.config.agent_mode == AgentMode::Finite {
                st.agents[self.config.restarted()] = sample_pair(dims, &next, &mut st.rng_restart);
            }
            rho_tilde_next = Some(next);
        }

        let gradient = loss_gradient(self.objective, t, &st.plan);
        let bonuses = if self.overrides.zero_bonuses || self.config.bonus_scale == 0.0 {
            BonusSchedule::zeros(dims)
        } else {
            bonus_schedule(&st.counters, self.config.delta, self.lipschitz, self.config.num_episodes)?
                .scaled(self.config.bonus_scale)
        };
        let kernel = match &self.overrides.planning_kernel {
            Some(k) => k.clone(),
            None => st.counters.empirical_kernel(),
        };
        let (init, terminal) = match framework {
            Framework::KnownRho => (rho_next.clone(), TerminalMode::Constrained),
            Framework::UnknownRho => (
                rho_tilde_next.clone().expect("set above"),
                TerminalMode::Constrained,
            ),
            Framework::EpisodicBaseline => (self.rho.clone(), TerminalMode::Penalty(self.config.gamma)),
        };
        let problem = EpisodeProblem {
            gradient,
            bonuses,
            prior_policy: st.policy.clone(),
            kernel,
            init,
            target: self.rho.clone(),
            eta: self.config.eta,
            alpha_bar: self.config.alpha_bar,
            terminal,
            bregman: BregmanKind::PolicyGamma,
        };
        let dual = DualState {
            lambda: st.lambda,
            ..self.config.dual
        };
        let solution = match self.config.dual_overrun {
            DualOverrun::Abort => solve_episode(&problem, &dual)?,
            DualOverrun::PlayLast => solve_episode_capped(&problem, &dual)?,
        };
        if terminal == TerminalMode::Constrained {
            st.lambda = solution.diagnostics.lambda_final;
        }

        let prev = st.records.last().map_or(0.0, |r| r.regret_cum);
        let charged = match self.config.penalty_index {
            PenaltyIndex::Current => rho_gap,
            PenaltyIndex::Next => rho_next.l1_distance(self.rho),
        };
        st.records.push(EpisodeRecord {
            episode: t,
            loss,
            comparator_loss,
            rho_gap,
            rho_gap_next: rho_next.l1_distance(self.rho),
            rho_tilde_gap,
            regret_cum: prev + loss - comparator_loss + self.config.gamma * charged,
            diagnostics: solution.diagnostics,
        });
        st.policy = if self.config.mix_rate > 0.0 {
            solution.policy.mixed_with_uniform(self.config.mix_rate)
        } else {
            solution.policy
        };
        st.plan = solution.occupancy;
        st.rho_t = rho_next;
        if let Some(next) = rho_tilde_next {
            st.rho_tilde = next;
        }
        st.episode = t;
        Ok(())
    }

    /// Runs the remaining episodes, calling `on_episode` after each one.
    pub fn run_with<F>(mut self, mut on_episode: F) -> Result<RegretLedger>
    where
        F: FnMut(&RunnerState) -> Result<()>,
    {
        while !self.is_done() {
            self.step()?;
            on_episode(&self.state)?;
        }
        Ok(self.into_ledger())
    }

    pub fn into_ledger(self) -> RegretLedger {
        RegretLedger {
            gamma: self.config.gamma,
            penalty_index: self.config.penalty_index,
            records: self.state.records,
        }
    }
}

/// Advances every walker by one episode and returns the trajectory of one
/// uniformly chosen walker other than the restarted one.
fn step_walkers(
    agents: &mut [(usize, usize)],
    policy: &Policy,
    kernel: &TransitionKernel,
    restarted: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let dims = kernel.dims();
    let pool = agents.len() - usize::from(restarted.is_some());
    let mut chosen = rng.gen_range(0..pool);
    if let Some(r) = restarted {
        if chosen >= r {
            chosen += 1;
        }
    }
    let mut observed = None;
    for (j, agent) in agents.iter_mut().enumerate() {
        if Some(j) == restarted {
            continue;
        }
        if j == chosen {
            let traj = sample_trajectory(policy, kernel, *agent, rng)?;
            *agent = *traj.steps().last().expect("non-empty trajectory");
            observed = Some(traj);
        } else {
            let (mut x, mut a) = *agent;
            for n in 1..=dims.horizon {
                x = sample_index(kernel.row(n, x, a), rng);
                a = sample_index(policy.row(n, x), rng);
            }
            *agent = (x, a);
        }
    }
    Ok(observed.expect("chosen walker exists"))
}

/// Runs the configured framework to completion.
pub fn run_protocol(
    kernel: &TransitionKernel,
    rho: &Distribution,
    objective: &dyn Objective,
    config: ProtocolConfig,
) -> Result<RegretLedger> {
    Runner::new(kernel, rho, objective, config, ProtocolOverrides::default())?.run_with(|_| Ok(()))
}

fn run_framework(
    kernel: &TransitionKernel,
    rho: &Distribution,
    objective: &dyn Objective,
    config: ProtocolConfig,
    framework: Framework,
) -> Result<RegretLedger> {
    if config.framework != framework {
        return Err(Error::Config(format!(
            "configuration selects {}, expected {}",
            config.framework.label(),
            framework.label()
        )));
    }
    run_protocol(kernel, rho, objective, config)
}

pub fn run_mdpp_k(
    kernel: &TransitionKernel,
    rho: &Distribution,
    objective: &dyn Objective,
    config: ProtocolConfig,
) -> Result<RegretLedger> {
    run_framework(kernel, rho, objective, config, Framework::KnownRho)
}

pub fn run_mdpp_u(
    kernel: &TransitionKernel,
    rho: &Distribution,
    objective: &dyn Objective,
    config: ProtocolConfig,
) -> Result<RegretLedger> {
    run_framework(kernel, rho, objective, config, Framework::UnknownRho)
}

pub fn run_episodic_baseline(
    kernel: &TransitionKernel,
    rho: &Distribution,
    objective: &dyn Objective,
    config: ProtocolConfig,
) -> Result<RegretLedger> {
    run_framework(kernel, rho, objective, config, Framework::EpisodicBaseline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{entropy_objective, Environment, LinearObjective, Preset, DEFAULT_ENTROPY_FLOOR};
    use crate::mdp::episode_transition_matrix;

    fn record(loss: f64, comp: f64, gap: f64) -> EpisodeRecord {
        EpisodeRecord {
            episode: 0,
            loss,
            comparator_loss: comp,
            rho_gap: gap,
            rho_gap_next: 0.0,
            rho_tilde_gap: None,
            regret_cum: 0.0,
            diagnostics: DualDiagnostics {
                lambda_final: 0.0,
                dual_iters: 0,
                g_final: 0.0,
                alpha_bar: 0.0,
            },
        }
    }

    #[test]
    fn hand_ledger_regret() {
        let recs = vec![record(1.0, 0.8, 0.0), record(2.0, 1.5, 0.1), record(0.5, 0.7, 0.2)];
        let r = periodic_regret(&recs, 10.0, PenaltyIndex::Current);
        assert!((r[2] - 3.5).abs() < 1e-12);
        let doubled = periodic_regret(&recs, 20.0, PenaltyIndex::Current);
        assert!((doubled[2] - r[2] - 10.0 * 0.3).abs() < 1e-12);
        let self_play = vec![record(1.0, 1.0, 0.0); 5];
        assert!(periodic_regret(&self_play, 1000.0, PenaltyIndex::Current)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn loglog_slope_of_power_laws() {
        let linear: Vec<f64> = (1..=400).map(|t| 3.0 * t as f64).collect();
        assert!((loglog_slope(&linear) - 1.0).abs() < 1e-12);
        let root: Vec<f64> = (1..=400).map(|t| (t as f64).sqrt()).collect();
        assert!((loglog_slope(&root) - 0.5).abs() < 1e-12);
    }

    fn symmetric_ring(horizon: usize) -> (TransitionKernel, Distribution) {
        // Two states; both actions flip the state. The uniform policy and
        // rho uniform over pairs are periodic for even horizons.
        let dims = SpaceDims::new(2, 2, horizon).unwrap();
        let base = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        (
            TransitionKernel::stationary(dims, &base).unwrap(),
            Distribution::uniform(dims.pairs()),
        )
    }

    #[test]
    fn comparator_on_symmetric_problem() {
        let (kernel, rho) = symmetric_ring(2);
        let obj = entropy_objective(DEFAULT_ENTROPY_FLOOR).unwrap();
        let c = offline_optimal_periodic(&kernel, &rho, &obj, 1, &ComparatorConfig::default()).unwrap();
        let p = episode_transition_matrix(&c.policy, &kernel).unwrap();
        assert!(p.apply(&rho).unwrap().l1_distance(&rho) < 1e-3);
        let uniform = forward_rollout(&Policy::uniform(kernel.dims()), &rho, &kernel).unwrap();
        assert!((total_loss(&obj, 1, &c.occupancy) - total_loss(&obj, 1, &uniform)).abs() < 1e-3);
    }

    #[test]
    fn comparator_single_action() {
        let dims = SpaceDims::new(2, 1, 1).unwrap();
        let kernel = TransitionKernel::stationary(dims, &[0.3, 0.7, 0.6, 0.4]).unwrap();
        let rho = Distribution::new(vec![0.5, 0.5]).unwrap();
        let obj = LinearObjective::zeros(dims);
        let c = offline_optimal_periodic(&kernel, &rho, &obj, 1, &ComparatorConfig::default()).unwrap();
        // rho P = (0.45, 0.55).
        assert!((c.defect - 0.1).abs() < 1e-12);
    }

    #[test]
    fn comparator_matches_grid_minimum() {
        // From rho = (0, a0) the agent lands in state 1, where both actions
        // lead back to 0; the free step-1 action maximizes entropy.
        let dims = SpaceDims::new(2, 2, 2).unwrap();
        let base = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let kernel = TransitionKernel::stationary(dims, &base).unwrap();
        let rho = Distribution::dirac(4, 0);
        let obj = entropy_objective(DEFAULT_ENTROPY_FLOOR).unwrap();
        let c = offline_optimal_periodic(&kernel, &rho, &obj, 1, &ComparatorConfig::default()).unwrap();
        let value = total_loss(&obj, 1, &c.occupancy);
        let grid = crate::oracles::constrained_grid_minimum(&kernel, &rho, &obj, 0.02, c.defect + 1e-9)
            .expect("feasible grid point");
        assert!(value <= grid.0 + 0.02, "{value} vs {}", grid.0);
        assert!((value + 2f64.ln()).abs() < 1e-2);
    }

    fn periodic_setup() -> (TransitionKernel, Distribution, Policy) {
        let (kernel, rho) = symmetric_ring(4);
        let policy = Policy::uniform(kernel.dims());
        (kernel, rho, policy)
    }

    fn small_config(framework: Framework, episodes: usize) -> ProtocolConfig {
        ProtocolConfig {
            num_episodes: episodes,
            num_agents: 4,
            framework,
            eta: 0.5,
            alpha_bar: AlphaBar::Fixed(0.0),
            gamma: 10.0,
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn fixed_point_with_exact_dynamics() {
        let (kernel, rho, policy) = periodic_setup();
        let obj = LinearObjective::zeros(kernel.dims());
        for framework in [Framework::KnownRho, Framework::UnknownRho] {
            let overrides = ProtocolOverrides {
                planning_kernel: Some(kernel.clone()),
                tilde_kernel: Some(kernel.clone()),
                zero_bonuses: true,
                initial_policy: Some(policy.clone()),
                comparator: None,
            };
            let runner = Runner::new(&kernel, &rho, &obj, small_config(framework, 20), overrides).unwrap();
            let ledger = runner.run_with(|_| Ok(())).unwrap();
            assert_eq!(ledger.records.len(), 20);
            for r in &ledger.records {
                assert!(r.rho_gap < 1e-12);
                assert!(r.diagnostics.g_final <= 1e-3);
                if let Some(g) = r.rho_tilde_gap {
                    assert!(g < 1e-12);
                }
            }
        }
    }

    #[test]
    fn exact_tilde_kernel_tracks_rho() {
        let env = Environment::preset(Preset::MaxEntropySmall, 0.1).unwrap();
        let overrides = ProtocolOverrides {
            tilde_kernel: Some(env.kernel.clone()),
            ..ProtocolOverrides::default()
        };
        let config = ProtocolConfig {
            num_episodes: 15,
            framework: Framework::UnknownRho,
            ..ProtocolConfig::default()
        };
        let runner = Runner::new(&env.kernel, &env.rho, env.objective.as_ref(), config, overrides).unwrap();
        let ledger = runner.run_with(|_| Ok(())).unwrap();
        assert_eq!(ledger.records[0].rho_tilde_gap, Some(0.0));
        for r in &ledger.records {
            assert!(r.rho_tilde_gap.unwrap() < 1e-12);
        }
    }

    #[test]
    fn ledgers_are_reproducible_and_recomputable() {
        let env = Environment::preset(Preset::ObstaclesSmall, 0.1).unwrap();
        for framework in [Framework::KnownRho, Framework::UnknownRho, Framework::EpisodicBaseline] {
            for agent_mode in [AgentMode::MeanField, AgentMode::Finite] {
                let config = ProtocolConfig {
                    num_episodes: 8,
                    num_agents: 5,
                    framework,
                    agent_mode,
                    seed: 9,
                    ..ProtocolConfig::default()
                };
                let a = run_protocol(&env.kernel, &env.rho, env.objective.as_ref(), config).unwrap();
                let b = run_protocol(&env.kernel, &env.rho, env.objective.as_ref(), config).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.records.len(), 8);
                assert!(a.recomputation_error() < 1e-9);
                for r in &a.records {
                    assert!(r.loss.is_finite() && (0.0..=2.0 + 1e-12).contains(&r.rho_gap));
                }
            }
        }
    }

    #[test]
    fn first_episode_uses_uniform_policy_and_rho() {
        let env = Environment::preset(Preset::MaxEntropySmall, 0.1).unwrap();
        let config = ProtocolConfig {
            num_episodes: 3,
            ..ProtocolConfig::default()
        };
        let runner = Runner::new(&env.kernel, &env.rho, env.objective.as_ref(), config, ProtocolOverrides::default()).unwrap();
        assert_eq!(runner.state().policy, Policy::uniform(env.dims()));
        assert_eq!(runner.state().rho_t, env.rho);
        let uniform = 1.0 / env.dims().num_states as f64;
        assert!(runner.state().counters.empirical_kernel().row(1, 0, 0).iter().all(|&p| p == uniform));
    }

    #[test]
    fn baseline_plans_from_rho() {
        let env = Environment::preset(Preset::ObstaclesSmall, 0.1).unwrap();
        let config = ProtocolConfig {
            num_episodes: 5,
            framework: Framework::EpisodicBaseline,
            ..ProtocolConfig::default()
        };
        let mut runner =
            Runner::new(&env.kernel, &env.rho, env.objective.as_ref(), config, ProtocolOverrides::default()).unwrap();
        while !runner.is_done() {
            runner.step().unwrap();
            assert_eq!(runner.state().plan.initial(), &env.rho);
        }
    }

    #[test]
    fn resume_from_serialized_state_matches_straight_run() {
        let env = Environment::preset(Preset::MaxEntropySmall, 0.1).unwrap();
        let config = ProtocolConfig {
            num_episodes: 6,
            framework: Framework::UnknownRho,
            seed: 3,
            ..ProtocolConfig::default()
        };
        let straight = run_protocol(&env.kernel, &env.rho, env.objective.as_ref(), config).unwrap();
        let mut first =
            Runner::new(&env.kernel, &env.rho, env.objective.as_ref(), config, ProtocolOverrides::default()).unwrap();
        for _ in 0..3 {
            first.step().unwrap();
        }
        let saved = serde_json::to_string(first.state()).unwrap();
        let restored: RunnerState = serde_json::from_str(&saved).unwrap();
        let resumed = Runner::new(&env.kernel, &env.rho, env.objective.as_ref(), config, ProtocolOverrides::default())
            .unwrap()
            .resume(restored)
            .unwrap()
            .run_with(|_| Ok(()))
            .unwrap();
        assert_eq!(straight, resumed);
    }

    #[test]
    fn config_validation() {
        let mut c = ProtocolConfig {
            num_agents: 1,
            ..ProtocolConfig::default()
        };
        assert!(c.validate().is_err());
        c.framework = Framework::EpisodicBaseline;
        assert!(c.validate().is_ok());
        assert!(ProtocolConfig { delta: 1.0, ..ProtocolConfig::default() }.validate().is_err());
        assert!(ProtocolConfig { alpha_bar: AlphaBar::Fixed(1.0), ..ProtocolConfig::default() }
            .validate()
            .is_err());
        assert_eq!("u".parse::<Framework>().unwrap(), Framework::UnknownRho);
    }

    #[test]
    fn wrong_framework_entry_point_is_rejected() {
        let env = Environment::preset(Preset::MaxEntropySmall, 0.1).unwrap();
        let config = ProtocolConfig {
            num_episodes: 1,
            ..ProtocolConfig::default()
        };
        assert!(matches!(
            run_mdpp_u(&env.kernel, &env.rho, env.objective.as_ref(), config),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn start_states_follow_rho_t() {
        // Chi-squared check of the observed start pairs against a fixed rho_t.
        let dims = SpaceDims::new(3, 2, 1).unwrap();
        let rho = Distribution::new(vec![0.1, 0.2, 0.3, 0.05, 0.15, 0.2]).unwrap();
        let mut rng = stream(5, STREAM_OBSERVE);
        let n = 20_000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            let (x, a) = sample_pair(dims, &rho, &mut rng);
            counts[dims.pair(x, a)] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(rho.mass())
            .map(|(&c, &p)| (c as f64 - n as f64 * p).powi(2) / (n as f64 * p))
            .sum();
        // 99.9% quantile of chi-squared with 5 degrees of freedom.
        assert!(chi2 < 20.52, "chi2 = {chi2}");
    }
}
