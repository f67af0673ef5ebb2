use ommbrl::analysis::*;
use ommbrl::config::{EnvStream, StreamConfig, Variant};
use ommbrl::online::tabular::{diagnose, run_tabular_stream, TabularDiagnostics};
use ommbrl::tabular::{exact_occupancy, exact_value, TabularMdp, TabularPolicy};
use ommbrl::{Mdp, Policy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_triple(seed: u64) -> (Mdp, Mdp, Policy) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, na, hz) = (rng.random_range(1..=5), rng.random_range(1..=3), rng.random_range(1..=5));
    let m1 = TabularMdp::random(ns, na, hz, &mut rng);
    let other = TabularMdp::random(ns, na, hz, &mut rng);
    let m2 = m1.with_kernel(other.kernel().clone()).unwrap().with_costs(other.costs().to_vec()).unwrap();
    let pi = TabularPolicy::random(hz, ns, na, &mut rng);
    (m1, m2, pi)
}

#[test]
fn simulation_lemma_identical_mdps_give_zero() {
    let (m1, _, pi) = random_triple(3);
    let (lhs, rhs) = simulation_lemma_check(&m1, &m1, &pi).unwrap();
    assert_eq!(lhs, 0.0);
    assert!(rhs.abs() < 1e-15);
}

#[test]
fn simulation_lemma_equal_kernels_reduce_to_cost_gap() {
    let (m1, m2, pi) = random_triple(11);
    let m2 = m2.with_kernel(m1.kernel().clone()).unwrap();
    let (lhs, rhs) = simulation_lemma_check(&m1, &m2, &pi).unwrap();
    let occ = exact_occupancy(&m1, &pi).unwrap();
    let h = m1.horizon() as f64;
    let cost_gap: f64 = occ.averaged.iter().zip(m1.costs().iter().zip(m2.costs())).map(|(d, (c1, c2))| h * d * (c1 - c2)).sum();
    assert!((rhs - cost_gap).abs() < 1e-12);
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn simulation_lemma_holds_on_200_random_triples() {
    for seed in 0..200 {
        let (m1, m2, pi) = random_triple(seed);
        let (lhs, rhs) = simulation_lemma_check(&m1, &m2, &pi).unwrap();
        assert!((lhs - rhs).abs() <= 1e-9, "seed {seed}: {lhs} vs {rhs}");
    }
}

#[test]
fn simulation_lemma_rejects_shape_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m1: Mdp = TabularMdp::random(3, 2, 3, &mut rng);
    let m2: Mdp = TabularMdp::random(4, 2, 3, &mut rng);
    let pi = TabularPolicy::uniform(3, 3, 2);
    assert!(simulation_lemma_check(&m1, &m2, &pi).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simulation_lemma_is_an_equality(seed in any::<u64>()) {
        let (m1, m2, pi) = random_triple(seed);
        let (lhs, rhs) = simulation_lemma_check(&m1, &m2, &pi).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9);
    }

    #[test]
    fn simulation_lemma_is_antisymmetric_in_value(seed in any::<u64>()) {
        // swapping the MDPs flips the left side; the right side is its own identity
        let (m1, m2, pi) = random_triple(seed);
        let (l12, _) = simulation_lemma_check(&m1, &m2, &pi).unwrap();
        let (l21, r21) = simulation_lemma_check(&m2, &m1, &pi).unwrap();
        prop_assert!((l12 + l21).abs() < 1e-12);
        prop_assert!((l21 - r21).abs() <= 1e-9);
    }
}

fn tabular_cfg(seed: u64, drift: f64) -> StreamConfig {
    let mut cfg = StreamConfig::tabular();
    cfg.seed = seed;
    if let EnvStream::Tabular(t) = &mut cfg.env {
        t.drift = drift;
    }
    cfg
}

fn optimal(diags: &[TabularDiagnostics]) -> Vec<Policy> {
    diags.iter().map(|d| d.optimal.clone()).collect()
}

#[test]
fn perf_bound_against_own_policies_has_zero_gap() {
    let run = run_tabular_stream(&tabular_cfg(1, 0.3)).unwrap();
    let own: Vec<Policy> = run.diagnostics.iter().map(|d| d.policy.clone()).collect();
    for r in perf_bound_check(&run.diagnostics, &own).unwrap() {
        assert_eq!(r.lhs, 0.0);
        assert_eq!(r.slack, r.rhs);
        assert!(r.holds());
    }
}

#[test]
fn perf_bound_with_perfect_models_collapses() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let diags: Vec<TabularDiagnostics> = (0..6)
        .map(|_| {
            let mdp = TabularMdp::random(4, 2, 4, &mut rng);
            diagnose(&mdp, mdp.kernel().clone(), 0.5).unwrap()
        })
        .collect();
    let cmp: Vec<Policy> = diags.iter().map(|_| TabularPolicy::random(4, 4, 2, &mut rng)).collect();
    for r in perf_bound_check(&diags, &cmp).unwrap() {
        assert_eq!(r.rhs, 0.0);
        assert!(r.lhs <= 1e-12, "planner on the true model lost to a random policy: {}", r.lhs);
    }
    let theorem = theorem_bound_check(&diags, &cmp).unwrap();
    assert!(theorem.chain.iter().all(|r| r.lhs == 0.0 && r.rhs == 0.0));
    assert!(theorem.holds());
}

#[test]
fn perf_bound_components_are_recorded() {
    let run = run_tabular_stream(&tabular_cfg(2, 0.0)).unwrap();
    let reports = perf_bound_check(&run.diagnostics, &optimal(&run.diagnostics)).unwrap();
    let last = reports.last().unwrap();
    for key in ["eps_oc", "coverage_max", "l1_mean", "H", "rounds"] {
        assert!(last.components.contains_key(key), "missing {key}");
    }
    assert_eq!(last.components["H"], 5.0);
    assert_eq!(last.components["rounds"], 20.0);
    // the exact planner is optimal on its own model
    assert!(reports.iter().all(|r| r.components["eps_oc"] <= 1e-12));
    assert!(last.components["coverage_max"] >= 1.0);
}

#[test]
fn bounds_hold_on_seeded_streams() {
    for seed in 0..3 {
        for drift in [0.0, 0.5] {
            let run = run_tabular_stream(&tabular_cfg(seed, drift)).unwrap();
            let cmp = optimal(&run.diagnostics);
            let perf = perf_bound_check(&run.diagnostics, &cmp).unwrap();
            assert!(perf.iter().all(BoundReport::holds), "seed {seed} drift {drift}");
            let single = single_round_bound_check(&run.diagnostics, &cmp).unwrap();
            assert!(single.iter().all(BoundReport::holds), "seed {seed} drift {drift}");
            assert!(theorem_bound_check(&run.diagnostics, &cmp).unwrap().holds());
        }
    }
}

#[test]
fn bound_checks_reject_mismatched_comparisons() {
    let run = run_tabular_stream(&tabular_cfg(0, 0.0)).unwrap();
    let cmp = optimal(&run.diagnostics[..3]);
    assert!(perf_bound_check(&run.diagnostics, &cmp).is_err());
    assert!(perf_bound_check(&[], &[]).is_err());
}

#[test]
fn vacuous_report_is_not_a_failure() {
    let r = BoundReport { lhs: 3.0, rhs: f64::INFINITY, slack: f64::INFINITY, components: Default::default() };
    assert!(r.vacuous());
    assert!(r.holds());
    let r = BoundReport { lhs: 3.0, rhs: 2.0, slack: -1.0, components: Default::default() };
    assert!(!r.holds());
}

#[test]
fn theorem_report_on_a_run_includes_eps_model() {
    let run = run_tabular_stream(&tabular_cfg(0, 0.3)).unwrap();
    let report = theorem_report_for_run(&run, 50, 2.0).unwrap();
    assert!(report.holds());
    let eps = report.eps_model.unwrap();
    assert!(eps.is_finite() && eps >= 0.0);
    assert!(report.asymptote.unwrap() >= 0.0);
    assert_eq!(report.chain.len(), 20);
    assert!(report.kl_fit.is_some());
}

#[test]
fn eps_model_vanishes_on_a_realizable_stationary_stream_without_adaptation() {
    let mut cfg = tabular_cfg(0, 0.0);
    cfg.variant = Variant::SysId;
    let run = run_tabular_stream(&cfg).unwrap();
    // the true kernel is in the family, so a long enough search gets close to zero
    let eps = best_in_class_kl(&run, 2000, 4.0).unwrap();
    assert!(eps < 1e-3, "{eps}");
}

#[test]
fn line_fit_recovers_a_line() {
    let xs = [1.0, 2.0, 3.0, 4.0];
    let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 0.5 * x).collect();
    let fit = fit_line(&xs, &ys).unwrap();
    assert!((fit.intercept - 2.0).abs() < 1e-12 && (fit.slope + 0.5).abs() < 1e-12 && fit.rss < 1e-24);
    assert!(fit_line(&[1.0], &[1.0]).is_err());
}

#[test]
fn toy_regret_first_round_is_the_first_loss() {
    let stream = ToyStream::default();
    let r = ftml_toy_regret(&stream, 1, 4).unwrap();
    // one round: the comparator fits it exactly, so the regret is ℓ_1(U(0)) ≥ 0
    assert!(r[0] >= 0.0);
    let again = ftml_toy_regret(&stream, 50, 4).unwrap();
    assert_eq!(r[0], again[0]);
}

#[test]
fn toy_regret_stationary_stream_is_constant_after_round_one() {
    let r = ftml_toy_regret(&ToyStream::stationary(4), 256, 7).unwrap();
    assert!(r[0] > 0.0);
    assert!(r.iter().all(|x| (x - r[0]).abs() < 1e-12));
}

#[test]
fn toy_regret_grows_like_log_t() {
    let r = ftml_toy_regret(&ToyStream::default(), 1024, 0).unwrap();
    let (log_fit, lin_fit) = regret_shape(&doubling_points(&r, 32, 1024)).unwrap();
    assert!(log_fit.slope >= 0.0);
    assert!(log_fit.rss < lin_fit.rss);
}

#[test]
fn toy_regret_rejects_bad_streams() {
    assert!(ftml_toy_regret(&ToyStream { dim: 0, ..ToyStream::default() }, 4, 0).is_err());
    assert!(ftml_toy_regret(&ToyStream { alpha: 1.0, ..ToyStream::default() }, 4, 0).is_err());
}

#[test]
fn doubling_points_pick_powers_of_two() {
    let r: Vec<f64> = (1..=100).map(|t| t as f64).collect();
    let pts = doubling_points(&r, 8, 100);
    assert_eq!(pts, vec![(8, 8.0), (16, 16.0), (32, 32.0), (64, 64.0)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn toy_regret_is_nondecreasing(seed in any::<u64>(), dim in 1usize..5) {
        let r = ftml_toy_regret(&ToyStream { dim, ..ToyStream::default() }, 200, seed).unwrap();
        prop_assert!(r[0] >= 0.0);
        prop_assert!(r.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn perfect_model_value_matches_exact_planner(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = TabularMdp::random(3, 2, 3, &mut rng);
        let diag = diagnose(&mdp, mdp.kernel().clone(), 0.5).unwrap();
        prop_assert!((diag.j_policy - diag.j_optimal).abs() < 1e-12);
        prop_assert!((diag.j_optimal - exact_value(&mdp, &diag.optimal).unwrap().j).abs() < 1e-15);
    }
}
