//! Brute-force and randomized reference checks.
//!
//! Everything here is computed from first principles (explicit enumeration,
//! direct sums) and does not call the dynamic-programming solver, so it can
//! be used to audit it. The CLI `oracle` subcommand prints these tables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::environments::{four_room_kernel, GridSpec, Objective};
use crate::error::{Error, Result};
use crate::estimation::{bonus_schedule, confidence_width, BonusSchedule, VisitCounters};
use crate::mdp::{
    bellman_flow_residual, forward_rollout, sample_pair, sample_trajectory, Distribution,
    OccupancyMeasure, Policy, SpaceDims, TransitionKernel,
};
use crate::random::{random_distribution, random_kernel, random_policy};
use crate::solver::{
    backward_q_and_policy, bregman_divergence, constraint_value, solve_episode, AlphaBar,
    BregmanKind, DualState, EpisodeProblem, StageValues, TerminalMode,
};

/// Rollout written as an explicit sum over predecessor pairs.
fn rollout(policy: &Policy, init: &Distribution, kernel: &TransitionKernel) -> Vec<Vec<f64>> {
    let mut slices = Vec::new();
    rollout_into(policy, init, kernel, &mut slices);
    slices
}

/// [`rollout`] into reusable buffers.
fn rollout_into(policy: &Policy, init: &Distribution, kernel: &TransitionKernel, slices: &mut Vec<Vec<f64>>) {
    let dims = kernel.dims();
    slices.resize_with(dims.horizon + 1, Vec::new);
    slices[0].clear();
    slices[0].extend_from_slice(init.mass());
    for n in 1..=dims.horizon {
        let (done, rest) = slices.split_at_mut(n);
        let prev = &done[n - 1];
        let next = &mut rest[0];
        next.clear();
        next.resize(dims.pairs(), 0.0);
        for x in 0..dims.num_states {
            for a in 0..dims.num_actions {
                let m = prev[dims.pair(x, a)];
                if m == 0.0 {
                    continue;
                }
                let row = kernel.row(n, x, a);
                for y in 0..dims.num_states {
                    let pi = policy.row(n, y);
                    for b in 0..dims.num_actions {
                        next[dims.pair(y, b)] += m * row[y] * pi[b];
                    }
                }
            }
        }
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Lagrangian of an episode problem at `policy`, with the exact L1 terminal term.
pub fn lagrangian(problem: &EpisodeProblem, policy: &Policy, lambda: f64) -> f64 {
    let dims = problem.dims();
    let mu = rollout(policy, &problem.init, &problem.kernel);
    let mut value = 0.0;
    for n in 1..=dims.horizon {
        let loss = problem.gradient.slice(n);
        for x in 0..dims.num_states {
            let pi = policy.row(n, x);
            let prior = problem.prior_policy.row(n, x);
            for a in 0..dims.num_actions {
                let m = mu[n][dims.pair(x, a)];
                value += m * loss[dims.pair(x, a)];
                if problem.eta > 0.0 && m > 0.0 && pi[a] > 0.0 {
                    value += m * (pi[a] / prior[a]).ln() / problem.eta;
                }
            }
        }
    }
    let mut slack = 0.0;
    for n in 0..dims.horizon {
        for (i, &m) in mu[n].iter().enumerate() {
            value -= m * problem.bonuses.gradient_at(n)[i];
            slack += m * problem.bonuses.slack_at(n)[i];
        }
    }
    let gap = l1(&mu[dims.horizon], problem.target.mass());
    match problem.terminal {
        TerminalMode::Constrained => {
            let alpha = match problem.alpha_bar {
                AlphaBar::Fixed(a) => a,
                AlphaBar::Search => 0.0,
            };
            value + lambda * (gap - slack - alpha * l1(problem.init.mass(), problem.target.mass()))
        }
        TerminalMode::Penalty(w) => value + w * gap,
    }
}

fn grid_points(step: f64) -> Vec<f64> {
    let k = (1.0 / step).round() as usize;
    (0..=k).map(|i| i as f64 / k as f64).collect()
}

/// Evaluates `f` on every two-action policy whose free probabilities lie on
/// the grid and returns the smallest value with its policy. Requires
/// `num_actions == 2` and `num_states * horizon <= 4`. `f` receives a
/// reusable rollout buffer.
fn grid_search<F>(dims: SpaceDims, step: f64, f: F) -> Option<(f64, Policy)>
where
    F: Fn(&Policy, &mut Vec<Vec<f64>>) -> Option<f64> + Sync,
{
    assert_eq!(dims.num_actions, 2, "grid oracle needs two actions");
    let params = dims.num_states * dims.horizon;
    assert!(params <= 4, "grid oracle limited to four free parameters");
    let grid = grid_points(step);
    let g = grid.len();
    let total = g.pow(params as u32);
    let chunk = g.pow(params.saturating_sub(1) as u32);
    (0..total / chunk)
        .into_par_iter()
        .filter_map(|outer| {
            let mut best: Option<(f64, Policy)> = None;
            let mut policy = Policy::uniform(dims);
            let mut scratch = Vec::new();
            for inner in 0..chunk {
                let mut code = outer * chunk + inner;
                let probs = policy.probs_mut();
                for k in 0..params {
                    let i = code % g;
                    code /= g;
                    probs[2 * k] = grid[i];
                    probs[2 * k + 1] = 1.0 - grid[i];
                }
                if let Some(v) = f(&policy, &mut scratch) {
                    if best.as_ref().map_or(true, |(b, _)| v < *b) {
                        best = Some((v, policy.clone()));
                    }
                }
            }
            best
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Minimum of [`lagrangian`] over the policy grid, under the same limits as
/// [`grid_search`].
///
/// Policies are enumerated with the last step varying fastest, and each
/// evaluation recomputes only the steps whose policy rows changed.
pub fn lagrangian_grid_minimum(problem: &EpisodeProblem, lambda: f64, step: f64) -> (f64, Policy) {
    let dims = problem.dims();
    assert_eq!(dims.num_actions, 2, "grid oracle needs two actions");
    let (xs, horizon) = (dims.num_states, dims.horizon);
    let params = xs * horizon;
    assert!(params <= 4, "grid oracle limited to four free parameters");
    let grid = grid_points(step);
    let g = grid.len();
    let logs: Vec<[f64; 2]> = grid.iter().map(|p| [p.ln(), (1.0 - p).ln()]).collect();
    let log_prior: Vec<f64> = problem.prior_policy.as_slice().iter().map(|p| p.ln()).collect();
    let (dual, terminal_weight) = match problem.terminal {
        TerminalMode::Constrained => (lambda, lambda),
        TerminalMode::Penalty(w) => (0.0, w),
    };
    let alpha = match problem.alpha_bar {
        AlphaBar::Fixed(a) => a,
        AlphaBar::Search => 0.0,
    };

    // Step-0 terms and the state marginal entering step 1.
    let mut base = -dual * alpha * l1(problem.init.mass(), problem.target.mass());
    let mut first = vec![0.0; xs];
    for (i, &m) in problem.init.mass().iter().enumerate() {
        base -= m * (problem.bonuses.gradient_at(0)[i] + dual * problem.bonuses.slack_at(0)[i]);
        for (y, p) in first.iter_mut().zip(problem.kernel.row(1, i / 2, i % 2)) {
            *y += m * p;
        }
    }

    // Adds the value of steps `from..=N` to `acc[from - 1]`, filling
    // `marginal[n]` for the steps after `from`.
    let evaluate = |digits: &[usize], from: usize, marginal: &mut [Vec<f64>], acc: &mut [f64]| -> f64 {
        for n in from..=horizon {
            let mut v = acc[n - 1];
            let loss = problem.gradient.slice(n);
            let mut mu = [0.0; 8];
            for x in 0..xs {
                let k = (n - 1) * xs + x;
                let p = grid[digits[k]];
                for (a, pa) in [p, 1.0 - p].into_iter().enumerate() {
                    let i = 2 * x + a;
                    let m = marginal[n][x] * pa;
                    mu[i] = m;
                    v += m * loss[i];
                    if problem.eta > 0.0 && m > 0.0 && pa > 0.0 {
                        v += m * (logs[digits[k]][a] - log_prior[2 * k + a]) / problem.eta;
                    }
                }
            }
            if n < horizon {
                let next = &mut marginal[n + 1];
                next.iter_mut().for_each(|y| *y = 0.0);
                for (i, &m) in mu[..2 * xs].iter().enumerate() {
                    v -= m * (problem.bonuses.gradient_at(n)[i] + dual * problem.bonuses.slack_at(n)[i]);
                    for (y, p) in next.iter_mut().zip(problem.kernel.row(n + 1, i / 2, i % 2)) {
                        *y += m * p;
                    }
                }
            } else {
                v += terminal_weight * l1(&mu[..2 * xs], problem.target.mass());
            }
            acc[n] = v;
        }
        acc[horizon]
    };

    let chunk = g.pow(params as u32 - 1);
    let (_, digits) = (0..g)
        .into_par_iter()
        .map(|lead| {
            let mut digits = vec![0; params];
            digits[0] = lead;
            let mut marginal = vec![vec![0.0; xs]; horizon + 1];
            marginal[1].copy_from_slice(&first);
            let mut acc = vec![0.0; horizon + 1];
            acc[0] = base;
            let mut best = (evaluate(&digits, 1, &mut marginal, &mut acc), digits.clone());
            for _ in 1..chunk {
                // Odometer over digits 1.., the last one fastest.
                let mut k = params - 1;
                while digits[k] + 1 == g {
                    digits[k] = 0;
                    k -= 1;
                }
                digits[k] += 1;
                let v = evaluate(&digits, k / xs + 1, &mut marginal, &mut acc);
                if v < best.0 {
                    best = (v, digits.clone());
                }
            }
            best
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("grid is non-empty");
    let mut policy = Policy::uniform(dims);
    for (k, &d) in digits.iter().enumerate() {
        policy.probs_mut()[2 * k] = grid[d];
        policy.probs_mut()[2 * k + 1] = 1.0 - grid[d];
    }
    // The search uses tabulated logarithms; report the exact value.
    (lagrangian(problem, &policy, lambda), policy)
}

/// Minimum of `F(mu^pi)` over grid policies with `||mu_N - rho||_1 <= budget`.
pub fn constrained_grid_minimum(
    kernel: &TransitionKernel,
    rho: &Distribution,
    objective: &dyn Objective,
    step: f64,
    budget: f64,
) -> Option<(f64, Policy)> {
    let dims = kernel.dims();
    grid_search(dims, step, |p, mu| {
        rollout_into(p, rho, kernel, mu);
        if l1(&mu[dims.horizon], rho.mass()) > budget {
            return None;
        }
        Some((1..=dims.horizon).map(|n| objective.value(1, n, &mu[n])).sum())
    })
}

/// Random instance with a point-mass target, used by the solver checks.
pub fn random_episode_problem(dims: SpaceDims, rng: &mut ChaCha8Rng) -> EpisodeProblem {
    let mut gradient = StageValues::zeros(dims);
    for n in 1..=dims.horizon {
        for v in gradient.slice_mut(n) {
            *v = rng.gen::<f64>();
        }
    }
    let kernel = random_kernel(dims, rng);
    let mut counters = VisitCounters::new(dims);
    let behaviour = random_policy(dims, rng);
    let init = random_distribution(dims.pairs(), rng);
    for _ in 0..rng.gen_range(0..20) {
        let start = sample_pair(dims, &init, rng);
        let traj = sample_trajectory(&behaviour, &kernel, start, rng).expect("valid sample");
        counters.update(&traj).expect("matching dims");
    }
    let bonuses = bonus_schedule(&counters, 0.1, 1.0, 1000)
        .expect("valid bonus parameters")
        .scaled(0.1);
    EpisodeProblem {
        gradient,
        bonuses,
        prior_policy: random_policy(dims, rng),
        kernel: counters.empirical_kernel(),
        init,
        target: Distribution::dirac(dims.pairs(), rng.gen_range(0..dims.pairs())),
        eta: rng.gen_range(0.1..2.0),
        alpha_bar: AlphaBar::Search,
        terminal: TerminalMode::Constrained,
        bregman: BregmanKind::PolicyGamma,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleTable {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub passed: bool,
}

impl OracleTable {
    pub fn render(&self) -> String {
        let mut out = format!("{} [{}]\n", self.title, if self.passed { "pass" } else { "FAIL" });
        out.push_str(&self.header.join("\t"));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridOracleRow {
    pub lambda: f64,
    pub dp_value: f64,
    pub grid_value: f64,
}

/// DP value versus grid minimum on random two-state, two-action, two-step
/// instances with point-mass targets.
pub fn dp_vs_grid(instances: usize, step: f64, seed: u64) -> Result<Vec<GridOracleRow>> {
    let dims = SpaceDims::new(2, 2, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(instances);
    for _ in 0..instances {
        let mut problem = random_episode_problem(dims, &mut rng);
        problem.kernel = random_kernel(dims, &mut rng);
        problem.bonuses = BonusSchedule::zeros(dims);
        problem.alpha_bar = AlphaBar::Fixed(0.0);
        problem.eta = rng.gen_range(0.5..2.0);
        let lambda = rng.gen_range(0.0..2.0);
        let dp = backward_q_and_policy(&problem, lambda)?;
        rows.push(GridOracleRow {
            lambda,
            dp_value: lagrangian(&problem, &dp.policy, lambda),
            grid_value: lagrangian_grid_minimum(&problem, lambda, step).0,
        });
    }
    Ok(rows)
}

pub fn dp_vs_grid_table(instances: usize, step: f64, slack: f64, seed: u64) -> Result<OracleTable> {
    let rows = dp_vs_grid(instances, step, seed)?;
    Ok(OracleTable {
        title: format!("DP vs policy grid (step {step}, slack {slack})"),
        header: ["instance", "lambda", "dp", "grid", "dp - grid"].map(String::from).to_vec(),
        passed: rows.iter().all(|r| r.dp_value <= r.grid_value + slack),
        rows: rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                vec![
                    i.to_string(),
                    format!("{:.4}", r.lambda),
                    format!("{:.8}", r.dp_value),
                    format!("{:.8}", r.grid_value),
                    format!("{:.3e}", r.dp_value - r.grid_value),
                ]
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilitySummary {
    pub instances: usize,
    /// Returned measures violating the residual or budget bound, plus
    /// solver errors other than proven infeasibility.
    pub failures: usize,
    /// Instances with no feasible contraction value on the grid; no measure
    /// is returned for them.
    pub infeasible: usize,
    pub max_residual: f64,
    pub max_g: f64,
}

enum Outcome {
    Solved(f64, f64),
    Infeasible,
    Failed,
}

/// Solves random episode problems and records flow residuals and
/// constraint values of the outputs.
pub fn solver_feasibility(instances: usize, seed: u64, epsilon: f64) -> FeasibilitySummary {
    let results: Vec<Outcome> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let dims = SpaceDims::new(
                rng.gen_range(1..=10),
                rng.gen_range(1..=4),
                rng.gen_range(1..=10),
            )
            .expect("positive dims");
            let problem = random_episode_problem(dims, &mut rng);
            let dual = DualState {
                epsilon,
                ..DualState::default()
            };
            let solution = match solve_episode(&problem, &dual) {
                Ok(s) => s,
                Err(Error::Infeasible { .. }) => return Outcome::Infeasible,
                Err(_) => return Outcome::Failed,
            };
            let Ok(residual) = bellman_flow_residual(&solution.occupancy, &problem.kernel, &problem.init) else {
                return Outcome::Failed;
            };
            let g = constraint_value(
                &solution.occupancy,
                &problem.target,
                &problem.bonuses,
                solution.diagnostics.alpha_bar,
                &problem.init,
            );
            Outcome::Solved(residual, g)
        })
        .collect();
    let mut summary = FeasibilitySummary {
        instances,
        failures: 0,
        infeasible: 0,
        max_residual: 0.0,
        max_g: f64::NEG_INFINITY,
    };
    for r in results {
        match r {
            Outcome::Solved(res, g) => {
                if !(res <= 1e-10 && g <= epsilon) {
                    summary.failures += 1;
                }
                summary.max_residual = summary.max_residual.max(res);
                summary.max_g = summary.max_g.max(g);
            }
            Outcome::Infeasible => summary.infeasible += 1,
            Outcome::Failed => summary.failures += 1,
        }
    }
    summary
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinskerSummary {
    pub pairs: usize,
    pub violations: usize,
    /// Smallest `D - 0.5 sup_n ||mu_n - mu'_n||_1^2` observed.
    pub min_margin: f64,
}

/// Random pairs of occupancy measures under a shared kernel.
pub fn pinsker_check(kind: BregmanKind, pairs: usize, seed: u64, tol: f64) -> Result<PinskerSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = PinskerSummary {
        pairs,
        violations: 0,
        min_margin: f64::INFINITY,
    };
    for _ in 0..pairs {
        let dims = SpaceDims::new(rng.gen_range(1..=6), rng.gen_range(1..=4), rng.gen_range(1..=6))?;
        let kernel = random_kernel(dims, &mut rng);
        let init = random_distribution(dims.pairs(), &mut rng);
        let other_init = if rng.gen_bool(0.5) {
            init.clone()
        } else {
            random_distribution(dims.pairs(), &mut rng)
        };
        let mu = forward_rollout(&random_policy(dims, &mut rng), &init, &kernel)?;
        let policy = random_policy(dims, &mut rng);
        let nu = forward_rollout(&policy, &other_init, &kernel)?;
        let d = match kind {
            BregmanKind::KlOccupancy => bregman_divergence(kind, &mu, &nu, None, 0.0)?,
            BregmanKind::PolicyGamma => bregman_divergence(kind, &mu, &nu, Some(&policy), 0.0)?,
        };
        let margin = d - 0.5 * sup_l1(&mu, &nu).powi(2);
        summary.min_margin = summary.min_margin.min(margin);
        if margin < -tol {
            summary.violations += 1;
        }
    }
    Ok(summary)
}

fn sup_l1(a: &OccupancyMeasure, b: &OccupancyMeasure) -> f64 {
    a.slices()
        .iter()
        .zip(b.slices())
        .map(|(x, y)| l1(x.mass(), y.mass()))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConcentrationRun {
    /// Checked `(t, n, x, a)` tuples with at least one visit.
    pub checked: usize,
    pub violations: usize,
    /// Largest ratio of the observed L1 error to the bound.
    pub max_ratio: f64,
}

/// Open `side x side` grid with the start in a corner.
pub fn open_grid(side: usize, noise: f64) -> Result<GridSpec> {
    let mut map = String::new();
    for r in 0..side {
        for c in 0..side {
            map.push(if r == 0 && c == 0 { 'S' } else { '.' });
        }
        map.push('\n');
    }
    GridSpec::parse_map(&map, noise)
}

/// One reset-free agent follows the uniform policy for `episodes` episodes;
/// after every episode the L1 error of each visited empirical row is
/// compared with `C_delta / sqrt(count)`.
pub fn concentration_run(
    spec: &GridSpec,
    horizon: usize,
    episodes: usize,
    delta: f64,
    seed: u64,
) -> Result<ConcentrationRun> {
    let (kernel, rho) = four_room_kernel(spec, horizon)?;
    let dims = kernel.dims();
    let c_delta = confidence_width(dims, episodes, delta)?;
    let policy = Policy::uniform(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counters = VisitCounters::new(dims);
    let mut start = sample_pair(dims, &rho, &mut rng);
    let mut run = ConcentrationRun {
        checked: 0,
        violations: 0,
        max_ratio: 0.0,
    };
    for _ in 0..episodes {
        let traj = sample_trajectory(&policy, &kernel, start, &mut rng)?;
        start = *traj.steps().last().expect("non-empty trajectory");
        counters.update(&traj)?;
        let estimate = counters.empirical_kernel();
        for n in 1..=dims.horizon {
            for x in 0..dims.num_states {
                for a in 0..dims.num_actions {
                    let count = counters.pair_count(n - 1, x, a);
                    if count == 0 {
                        continue;
                    }
                    let err = l1(estimate.row(n, x, a), kernel.row(n, x, a));
                    let bound = c_delta / (count as f64).sqrt();
                    run.checked += 1;
                    run.max_ratio = run.max_ratio.max(err / bound);
                    if err > bound {
                        run.violations += 1;
                    }
                }
            }
        }
    }
    Ok(run)
}

/// Largest error of `obj.gradient` against central finite differences over
/// `points` random distributions of length `len`, relative to
/// `max(1, |gradient|)`.
pub fn gradient_check(obj: &dyn Objective, len: usize, step: usize, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut g = vec![0.0; len];
    for _ in 0..points {
        let mu = random_distribution(len, &mut rng).into_vec();
        obj.gradient(1, step, &mu, &mut g);
        let mut probe = mu.clone();
        for i in 0..len {
            let h = 1e-6 * mu[i].max(1e-3);
            probe[i] = mu[i] + h;
            let plus = obj.value(1, step, &probe);
            probe[i] = mu[i] - h;
            let minus = obj.value(1, step, &probe);
            probe[i] = mu[i];
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1.0));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::entropy_objective;

    #[test]
    fn grid_enumerates_every_point() {
        let dims = SpaceDims::new(1, 2, 2).unwrap();
        let count = std::sync::atomic::AtomicUsize::new(0);
        grid_search(dims, 0.25, |_, _| {
            count.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            Some(0.0)
        });
        assert_eq!(count.into_inner(), 25);
    }

    #[test]
    fn explicit_rollout_agrees_with_library_rollout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = SpaceDims::new(3, 2, 4).unwrap();
        let kernel = random_kernel(dims, &mut rng);
        let policy = random_policy(dims, &mut rng);
        let init = random_distribution(dims.pairs(), &mut rng);
        let a = rollout(&policy, &init, &kernel);
        let b = forward_rollout(&policy, &init, &kernel).unwrap();
        for n in 0..=dims.horizon {
            assert!(l1(&a[n], b.slice(n).mass()) < 1e-14);
        }
    }

    #[test]
    fn lagrangian_matches_solver_helper() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = SpaceDims::new(2, 2, 2).unwrap();
        let mut p = random_episode_problem(dims, &mut rng);
        p.alpha_bar = AlphaBar::Fixed(0.3);
        let policy = random_policy(dims, &mut rng);
        let a = lagrangian(&p, &policy, 0.7);
        let b = crate::solver::lagrangian_value(&p, &policy, 0.7).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn incremental_grid_matches_exhaustive_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (states, horizon) in [(1, 1), (2, 1), (1, 3), (2, 2), (1, 4)] {
            let dims = SpaceDims::new(states, 2, horizon).unwrap();
            for terminal in [TerminalMode::Constrained, TerminalMode::Penalty(1.5)] {
                let mut p = random_episode_problem(dims, &mut rng);
                p.kernel = random_kernel(dims, &mut rng);
                p.alpha_bar = AlphaBar::Fixed(0.2);
                p.terminal = terminal;
                let lambda = rng.gen_range(0.0..2.0);
                let (fast, policy) = lagrangian_grid_minimum(&p, lambda, 0.125);
                let (slow, _) = grid_search(dims, 0.125, |q, _| Some(lagrangian(&p, q, lambda))).unwrap();
                assert!((fast - slow).abs() < 1e-12, "{states}x{horizon} {terminal:?}: {fast} vs {slow}");
                assert_eq!(fast, lagrangian(&p, &policy, lambda));
            }
        }
    }

    #[test]
    fn constrained_grid_respects_budget() {
        let dims = SpaceDims::new(2, 2, 2).unwrap();
        let base = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let kernel = TransitionKernel::stationary(dims, &base).unwrap();
        let rho = Distribution::dirac(4, 0);
        let obj = entropy_objective(1e-12).unwrap();
        let (v, p) = constrained_grid_minimum(&kernel, &rho, &obj, 0.1, 1e-9).unwrap();
        // Staying put with action 0 is the only periodic choice.
        assert!(v.abs() < 1e-9);
        assert_eq!(p.row(1, 0)[0], 1.0);
        assert!(constrained_grid_minimum(&kernel, &rho, &obj, 0.1, 2.0).unwrap().0 < -0.5);
    }

    #[test]
    fn small_tables_pass() {
        let t = dp_vs_grid_table(2, 0.05, 0.05, 3).unwrap();
        assert!(t.passed, "{}", t.render());
        let s = solver_feasibility(20, 4, 1e-3);
        assert_eq!(s.failures, 0, "{s:?}");
        for kind in [BregmanKind::KlOccupancy, BregmanKind::PolicyGamma] {
            assert_eq!(pinsker_check(kind, 100, 5, 1e-12).unwrap().violations, 0);
        }
        let run = concentration_run(&open_grid(3, 0.1).unwrap(), 5, 20, 0.1, 6).unwrap();
        assert!(run.checked > 0);
    }
}
