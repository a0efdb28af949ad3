//! Randomized invariants of the core building blocks.

use periodic_mdp_core::environments::{entropy_objective, obstacle_objective, Objective};
use periodic_mdp_core::estimation::VisitCounters;
use periodic_mdp_core::harness::{read_ledger, write_ledger, LedgerRow};
use periodic_mdp_core::mdp::{
    bellman_flow_residual, forward_rollout, sample_pair, sample_trajectory, Distribution, SpaceDims,
    SparseKernel,
};
use periodic_mdp_core::oracles::random_episode_problem;
use periodic_mdp_core::random::{random_distribution, random_kernel, random_policy, random_simplex};
use periodic_mdp_core::solver::{
    backward_q_and_policy, dual_ascent_capped, greedy_response, lagrangian_value, AlphaBar, DualState,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims_strategy() -> impl Strategy<Value = SpaceDims> {
    (1usize..6, 1usize..4, 1usize..6).prop_map(|(x, a, n)| SpaceDims::new(x, a, n).unwrap())
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6f64..1e6,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(1e300),
        Just(0.1 + 0.2),
    ]
}

fn ledger_row() -> impl Strategy<Value = LedgerRow> {
    (
        0usize..1_000_000,
        (finite(), finite(), finite(), finite()),
        prop::option::of(finite()),
        (finite(), 0usize..10_000, finite(), 0.0f64..1.0),
    )
        .prop_map(|(episode, (loss, cmp, regret, gap), tilde, (lambda, iters, g, alpha))| LedgerRow {
            episode,
            loss,
            comparator_loss: cmp,
            regret_cum: regret,
            rho_gap_l1: gap,
            rho_tilde_gap_l1: tilde,
            lambda_final: lambda,
            dual_iters: iters,
            g_final: g,
            alpha_bar: alpha,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sparse_rollout_matches_dense(seed in any::<u64>(), dims in dims_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Empirical kernels mix sparse rows with uniform rows for unvisited pairs.
        let problem = random_episode_problem(dims, &mut rng);
        for kernel in [problem.kernel.clone(), random_kernel(dims, &mut rng)] {
            let policy = random_policy(dims, &mut rng);
            let init = random_distribution(dims.pairs(), &mut rng);
            let dense = forward_rollout(&policy, &init, &kernel).unwrap();
            let sparse = SparseKernel::new(&kernel).rollout(&policy, &init).unwrap();
            for (a, b) in dense.slices().iter().zip(sparse.slices()) {
                prop_assert!(a.l1_distance(b) < 1e-12);
            }
        }
    }

    #[test]
    fn counters_stay_consistent_and_grow(seed in any::<u64>(), dims in dims_strategy(), episodes in 1usize..15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = random_kernel(dims, &mut rng);
        let policy = random_policy(dims, &mut rng);
        let init = random_distribution(dims.pairs(), &mut rng);
        let mut counters = VisitCounters::new(dims);
        for _ in 0..episodes {
            let before: Vec<Vec<u64>> = (0..dims.horizon).map(|n| counters.pair_counts_at(n).to_vec()).collect();
            let traj = sample_trajectory(&policy, &kernel, sample_pair(dims, &init, &mut rng), &mut rng).unwrap();
            counters.update(&traj).unwrap();
            prop_assert!(counters.is_consistent());
            let mut added = 0;
            for (n, old) in before.iter().enumerate() {
                for (o, c) in old.iter().zip(counters.pair_counts_at(n)) {
                    prop_assert!(c >= o);
                    added += c - o;
                }
            }
            // One visit per step `0..N`.
            prop_assert_eq!(added, dims.horizon as u64);
        }
        let p_hat = counters.empirical_kernel();
        for n in 1..=dims.horizon {
            for x in 0..dims.num_states {
                for a in 0..dims.num_actions {
                    prop_assert!((p_hat.row(n, x, a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dp_policy_is_flow_consistent_and_beats_random_policies(
        seed in any::<u64>(),
        dims in dims_strategy(),
        lambda in 0.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut problem = random_episode_problem(dims, &mut rng);
        problem.alpha_bar = AlphaBar::Fixed(0.5);
        let sol = backward_q_and_policy(&problem, lambda).unwrap();
        prop_assert!(bellman_flow_residual(&sol.occupancy, &problem.kernel, &problem.init).unwrap() <= 1e-10);
        for n in 1..=dims.horizon {
            for x in 0..dims.num_states {
                let row = sol.policy.row(n, x);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
        let best = lagrangian_value(&problem, &sol.policy, lambda).unwrap();
        for _ in 0..5 {
            let other = lagrangian_value(&problem, &random_policy(dims, &mut rng), lambda).unwrap();
            prop_assert!(best <= other + 1e-9, "dp {best} vs random {other}");
        }
    }

    #[test]
    fn greedy_response_is_deterministic(seed in any::<u64>(), dims in dims_strategy(), w in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = random_episode_problem(dims, &mut rng);
        let sol = greedy_response(&problem, &SparseKernel::new(&problem.kernel), w).unwrap();
        for n in 1..=dims.horizon {
            for x in 0..dims.num_states {
                let row = sol.policy.row(n, x);
                prop_assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
                prop_assert_eq!(row.iter().filter(|&&p| p == 0.0).count(), dims.num_actions - 1);
            }
        }
    }

    #[test]
    fn converged_dual_ascent_meets_budget(seed in any::<u64>(), dims in dims_strategy()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut problem = random_episode_problem(dims, &mut rng);
        problem.alpha_bar = AlphaBar::Fixed(rng.gen_range(0.0..0.9));
        let dual = DualState { eta_lambda: 0.5, max_iters: 200, ..DualState::default() };
        let (out, converged) = dual_ascent_capped(&problem, &dual).unwrap();
        prop_assert!(out.lambda >= 0.0);
        prop_assert!(out.iterations <= dual.max_iters);
        prop_assert_eq!(converged, out.g <= dual.epsilon);
        if converged {
            prop_assert!(bellman_flow_residual(&out.solution.occupancy, &problem.kernel, &problem.init).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn objectives_are_convex_on_segments(seed in any::<u64>(), pairs in 2usize..30, t in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = SpaceDims::new(pairs, 1, 1).unwrap();
        let entropy = entropy_objective(1e-12).unwrap();
        let obstacles = obstacle_objective(dims, &[0], &[pairs - 1]).unwrap();
        let objectives: [&dyn Objective; 2] = [&entropy, &obstacles];
        let a = random_simplex(pairs, &mut rng);
        let b = random_simplex(pairs, &mut rng);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        for f in objectives {
            let chord = t * f.value(1, 1, &a) + (1.0 - t) * f.value(1, 1, &b);
            prop_assert!(f.value(1, 1, &mid) <= chord + 1e-12);
        }
    }

    #[test]
    fn entropy_is_permutation_invariant(seed in any::<u64>(), pairs in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = entropy_objective(1e-12).unwrap();
        let a = random_simplex(pairs, &mut rng);
        let mut b = a.clone();
        for i in (1..pairs).rev() {
            b.swap(i, rng.gen_range(0..=i));
        }
        prop_assert!((f.value(1, 1, &a) - f.value(1, 1, &b)).abs() <= 1e-12);
    }

    #[test]
    fn ledger_round_trips_exactly(rows in prop::collection::vec(ledger_row(), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        write_ledger(&path, &rows).unwrap();
        let back = read_ledger(&path).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            // Bitwise, so that -0.0 and 0.0 are told apart.
            prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            prop_assert_eq!(a.rho_tilde_gap_l1.map(f64::to_bits), b.rho_tilde_gap_l1.map(f64::to_bits));
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn dirac_target_distance_is_two_minus_twice_the_hit() {
    let rho = Distribution::dirac(4, 1);
    let mu = Distribution::new(vec![0.1, 0.6, 0.2, 0.1]).unwrap();
    assert!((mu.l1_distance(&rho) - (2.0 - 2.0 * 0.6)).abs() < 1e-15);
}
