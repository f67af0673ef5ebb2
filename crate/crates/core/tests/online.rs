use ommbrl::config::{EnvStream, StreamConfig, Variant};
use ommbrl::online::drive::{self, explore_coin, run_drive_stream, run_drive_stream_from, warm_start};
use ommbrl::online::tabular::{hindsight_regret, run_tabular_stream};
use ommbrl::online::*;
use ommbrl::tabular::coverage_coeff;
use ommbrl::Error;
use proptest::prelude::*;

fn tiny_drive(seed: u64) -> StreamConfig {
    let mut cfg = StreamConfig::default();
    cfg.seed = seed;
    cfg.rounds = 2;
    cfg.rollouts = 2;
    cfg.hyper.hidden = vec![8];
    cfg.hyper.n_meta_updates = 2;
    cfg.hyper.batch = 4;
    cfg.hyper.rounds_per_update = 1;
    cfg.hyper.warm_updates = 5;
    cfg.plan.horizon = 1;
    if let EnvStream::Drive(d) = &mut cfg.env {
        d.offline_rounds = 1;
        d.offline_rollouts = 1;
    }
    cfg
}

fn tabular(seed: u64) -> StreamConfig {
    let mut cfg = StreamConfig::tabular();
    cfg.seed = seed;
    cfg
}

#[test]
fn single_round_without_updates_keeps_the_warm_model() {
    let mut cfg = tiny_drive(3);
    cfg.rounds = 1;
    cfg.hyper.n_meta_updates = 0;
    let run = run_drive_stream(&cfg).unwrap();
    assert_eq!(run.snapshots.len(), 1);
    assert_eq!(run.snapshots[0], run.warm);
    let r = &run.records[0];
    assert_eq!(1 + r.data.len(), 1 + cfg.rollouts);
    assert_eq!(r.tau.source, Source::Explore);
    assert_eq!(r.model_snapshot, "round-001");

    let mut cfg = tabular(3);
    cfg.rounds = 1;
    cfg.hyper.n_meta_updates = 0;
    let run = run_tabular_stream(&cfg).unwrap();
    assert_eq!(run.snapshots[0], run.warm);
    assert_eq!(run.records[0].data.len(), cfg.rollouts);
}

#[test]
fn nearly_always_explore_coin() {
    let mut cfg = tabular(0);
    cfg.mix_prob = 0.999;
    cfg.rounds = 100;
    cfg.rollouts = 10;
    cfg.hyper.n_meta_updates = 1;
    let run = run_tabular_stream(&cfg).unwrap();
    let all: Vec<_> = run.records.iter().flat_map(|r| &r.data).collect();
    assert_eq!(all.len(), 1000);
    let explore = all.iter().filter(|d| d.source == Source::Explore).count();
    assert!(explore >= 990, "{explore}");

    let mut cfg = tiny_drive(0);
    cfg.mix_prob = 0.999;
    let coins = (1..=100).flat_map(|t| (1..=10).map(move |k| (t, k))).filter(|&(t, k)| explore_coin(&cfg, t, k)).count();
    assert!(coins >= 990, "{coins}");
}

#[test]
fn running_performance_examples() {
    assert_eq!(running_mean([Some(5.0), Some(5.0), Some(5.0)]), vec![5.0, 5.0, 5.0]);
    assert_eq!(running_mean([Some(2.0), Some(4.0)]), vec![2.0, 3.0]);
    let skipped = running_mean([None, Some(2.0), None, Some(4.0)]);
    assert!(skipped[0].is_nan());
    assert_eq!(&skipped[1..], &[2.0, 2.0, 3.0]);
}

#[test]
fn running_performance_uses_policy_rollouts_only() {
    let run = run_tabular_stream(&tabular(4)).unwrap();
    let per_round: Vec<Option<f64>> = run
        .records
        .iter()
        .map(|r| {
            let c: Vec<f64> = r.data.iter().filter(|d| d.source == Source::Policy).map(|d| d.cost).collect();
            (!c.is_empty()).then(|| c.iter().sum::<f64>() / c.len() as f64)
        })
        .collect();
    let got = running_performance(&run.records);
    let want = running_mean(per_round);
    assert_eq!(got.len(), want.len());
    for (a, b) in got.iter().zip(&want) {
        assert!(a == b || (a.is_nan() && b.is_nan()));
    }
    assert_eq!(got.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), run.running.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn running_mean_matches_prefix_mean_oracle(values in prop::collection::vec(prop::option::of(-100.0f64..100.0), 1..40)) {
        let got = running_mean(values.clone());
        for t in 0..values.len() {
            let seen: Vec<f64> = values[..=t].iter().flatten().copied().collect();
            if seen.is_empty() {
                prop_assert!(got[t].is_nan());
            } else {
                let want = seen.iter().sum::<f64>() / seen.len() as f64;
                prop_assert!((got[t] - want).abs() <= 1e-9 * (1.0 + want.abs()));
            }
        }
    }
}

#[test]
fn tabular_replay_is_bitwise() {
    let cfg = tabular(8);
    let (a, b) = (run_tabular_stream(&cfg).unwrap(), run_tabular_stream(&cfg).unwrap());
    assert_eq!(a.records, b.records);
    assert_eq!(a.snapshots, b.snapshots);
    assert_eq!(a.diagnostics, b.diagnostics);
}

#[test]
fn drive_replay_is_bitwise() {
    let cfg = tiny_drive(5);
    let (a, b) = (run_drive_stream(&cfg).unwrap(), run_drive_stream(&cfg).unwrap());
    assert_eq!(a.records, b.records);
    assert_eq!(a.snapshots, b.snapshots);
}

#[test]
fn metrics_csv_is_reproducible() {
    let cfg = tabular(1);
    let csv = |run: StreamRun| {
        let gaps = match &run {
            StreamRun::Tabular(r) => hindsight_regret(r).unwrap(),
            StreamRun::Drive(_) => unreachable!(),
        };
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &run.metrics(Some(&gaps))).unwrap();
        String::from_utf8(out).unwrap()
    };
    let a = csv(run_stream(&cfg).unwrap());
    assert_eq!(a, csv(run_stream(&cfg).unwrap()));
    let mut lines = a.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
    assert_eq!(lines.count(), cfg.rounds);
}

#[test]
fn metrics_leave_undefined_cells_empty() {
    let mut cfg = tiny_drive(2);
    cfg.mix_prob = 0.999;
    let run = StreamRun::Drive(run_drive_stream(&cfg).unwrap());
    let rows = run.metrics(None);
    assert!(rows.iter().all(|r| r.mean_cost.is_none() && r.kl_error.is_none()));
    let mut out = Vec::new();
    write_metrics_csv(&mut out, &rows).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("1,adapt,,"));
}

#[test]
fn coin_stream_is_independent_of_rollout_count() {
    let mut few = tiny_drive(6);
    few.rounds = 1;
    let mut many = few.clone();
    many.rollouts = 4;
    let (a, b) = (run_drive_stream(&few).unwrap(), run_drive_stream(&many).unwrap());
    assert_eq!(a.records[0].tau, b.records[0].tau);
    assert_eq!(a.records[0].data[..], b.records[0].data[..2]);
}

#[test]
fn every_round_contributes_one_adaptation_and_k_rollouts() {
    let run = run_tabular_stream(&tabular(2)).unwrap();
    for (i, r) in run.records.iter().enumerate() {
        assert_eq!(r.round, i + 1);
        assert_eq!(r.tau.round, r.round);
        assert_eq!(r.data.len(), run.config.rollouts);
        assert!(r.data.iter().all(|d| d.round == r.round));
        assert_eq!(r.episode_costs.len(), r.data.len());
    }
    let collected: usize = run.records.iter().map(|r| 1 + r.data.len()).sum();
    assert_eq!(collected, run.config.rounds * (1 + run.config.rollouts));
}

#[test]
fn explore_variant_never_trains_or_plans() {
    let mut cfg = tiny_drive(1);
    cfg.variant = Variant::Explore;
    let run = run_drive_stream(&cfg).unwrap();
    assert!(run.snapshots.iter().all(|s| *s == run.warm));
    assert_eq!(drive::hindsight_regret(&run).unwrap(), vec![0.0; cfg.rounds]);
}

#[test]
fn sysid_is_adaptation_with_a_zero_step() {
    let mut sysid = tabular(5);
    sysid.variant = Variant::SysId;
    let mut adapt = sysid.clone();
    adapt.variant = Variant::Adapt;
    adapt.hyper.alpha_adapt = 0.0;
    let (a, b) = (run_tabular_stream(&sysid).unwrap(), run_tabular_stream(&adapt).unwrap());
    assert_eq!(a.records, b.records);
    assert_eq!(a.snapshots, b.snapshots);
}

#[test]
fn mismatched_warm_start_is_rejected() {
    let cfg = tiny_drive(0);
    let mut speed = cfg.clone();
    speed.variant = Variant::AdaptSpeed;
    let warm = warm_start(&cfg).unwrap();
    assert!(matches!(run_drive_stream_from(&speed, warm), Err(Error::Arch(_))));
}

#[test]
fn tabular_rho_is_a_distribution_with_covered_support() {
    let run = run_tabular_stream(&tabular(0)).unwrap();
    for d in &run.diagnostics {
        assert!((d.rho.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.nu.iter().all(|x| *x > 0.0));
        assert!(coverage_coeff(&d.d_policy, &d.nu).unwrap().is_finite());
        assert!(d.coverage_optimal.is_finite() && d.coverage_optimal >= 1.0);
    }
}

fn mean_kl_curve(run: &ommbrl::online::TabularRun) -> Vec<f64> {
    let kl: Vec<Option<f64>> = run.diagnostics.iter().map(|d| Some(d.kl)).collect();
    running_mean(kl)
}

#[test]
fn realizable_stream_mean_kl_is_nonincreasing_after_round_three() {
    let run = run_tabular_stream(&tabular(0)).unwrap();
    let curve = mean_kl_curve(&run);
    for t in 3..curve.len() {
        assert!(curve[t] <= curve[t - 1], "round {}: {} > {}", t + 1, curve[t], curve[t - 1]);
    }
}

#[test]
fn realizable_stream_kl_falls_below_threshold_by_round_fifty() {
    let mut cfg = tabular(0);
    cfg.rounds = 50;
    cfg.rollouts = 200;
    let run = run_tabular_stream(&cfg).unwrap();
    let kl = run.diagnostics.last().unwrap().kl;
    assert!(kl < 1e-3, "{kl}");
}

#[test]
fn tabular_hindsight_gap_prefix_means_shrink() {
    let run = run_tabular_stream(&tabular(0)).unwrap();
    let gaps = hindsight_regret(&run).unwrap();
    assert_eq!(gaps.len(), 20);
    let prefix = running_mean(gaps.iter().map(|g| Some(*g)));
    assert!(prefix[19] <= 0.5 * prefix[4], "{} vs {}", prefix[19], prefix[4]);
}

#[test]
fn drive_hindsight_gaps_cover_every_round() {
    let run = run_drive_stream(&tiny_drive(4)).unwrap();
    let gaps = drive::hindsight_regret(&run).unwrap();
    assert_eq!(gaps.len(), run.records.len());
    for (g, r) in gaps.iter().zip(&run.records) {
        assert_eq!(g.is_nan(), r.policy_cost().is_none());
    }
}

#[test]
fn drifting_driver_changes_between_rounds() {
    let mut cfg = tiny_drive(9);
    let still = drive::round_profile(&cfg, 3).unwrap();
    if let EnvStream::Drive(d) = &mut cfg.env {
        d.drift = 0.0;
    }
    assert_eq!(drive::round_profile(&cfg, 0).unwrap(), drive::round_profile(&cfg, 5).unwrap());
    assert_ne!(still, drive::round_profile(&tiny_drive(9), 4).unwrap());
}

#[test]
fn round_failures_carry_the_round_index() {
    let err = Error::Round { round: 3, source: Box::new(Error::Empty("x")) };
    assert!(err.to_string().starts_with("round 3 failed"));
}

#[test]
fn logit_table_text_round_trips_bitwise() {
    let run = run_tabular_stream(&tabular(3)).unwrap();
    let model = run.snapshots.last().unwrap();
    let back = ommbrl::online::tabular::LogitModel::from_text(&model.to_text()).unwrap();
    assert_eq!(back.logits.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), model.logits.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(&back, model);
    assert!(ommbrl::online::tabular::LogitModel::from_text("n_states = 2\nn_actions = 1\nlogits = 0.0\n").is_err());
    assert_eq!(ommbrl::online::tabular::tabular_warm_start(&tabular(3)).unwrap(), run.warm);
}
