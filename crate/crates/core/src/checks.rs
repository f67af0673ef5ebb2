//! Reproducible measurements behind the `verify` command and the acceptance
//! suite. Each function measures; callers decide pass or fail.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{
    doubling_points, ftml_toy_regret, perf_bound_check, regret_shape, simulation_lemma_check, single_round_bound_check,
    theorem_bound_check, BoundReport, ToyStream,
};
use crate::config::{EnvStream, StreamConfig, Variant};
use crate::dynmodel::{
    adapt, grad_multistep_loss, meta_gradient, multistep_loss, ActionCoding, ArchSpec, Batch, BatchItem, HistoryWindow, ModelParams,
    Order, PlanarFrame,
};
use crate::error::{Error, Result};
use crate::online::drive::{run_drive_stream_from, warm_start, DriveRun};
use crate::online::tabular::{hindsight_regret, run_tabular_stream};
use crate::online::{run_stream, running_mean, write_metrics_csv};
use crate::tabular::{TabularMdp, TabularPolicy};
use crate::{Mdp, Policy};

/// Two MDPs on one state space and a policy, all seeded.
pub fn random_triple(seed: u64) -> (Mdp, Mdp, Policy) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, na, hz) = (rng.random_range(1..=5), rng.random_range(1..=3), rng.random_range(1..=5));
    let m1 = TabularMdp::random(ns, na, hz, &mut rng);
    let other: Mdp = TabularMdp::random(ns, na, hz, &mut rng);
    let m2 = m1.with_kernel(other.kernel().clone()).and_then(|m| m.with_costs(other.costs().to_vec())).expect("same shapes");
    let pi = TabularPolicy::random(hz, ns, na, &mut rng);
    (m1, m2, pi)
}

/// Largest `|lhs − rhs|` of the simulation lemma over seeded triples.
pub fn simulation_lemma_max_error(triples: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..triples as u64 {
        let (m1, m2, pi) = random_triple(seed.wrapping_add(i));
        let (lhs, rhs) = simulation_lemma_check(&m1, &m2, &pi)?;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Worst scaled componentwise error `|a − f| / max(1, |f|)` against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientOracle {
    pub loss: f64,
    pub first_order: f64,
    pub second_order: f64,
    pub max_params: usize,
}

impl GradientOracle {
    pub fn worst(&self) -> f64 {
        self.loss.max(self.first_order).max(self.second_order)
    }
}

const FD_STEP: f64 = 1e-5;

fn central_differences(f: impl Fn(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let mut up = theta.to_vec();
            up[i] += FD_STEP;
            let mut down = theta.to_vec();
            down[i] -= FD_STEP;
            (f(&up) - f(&down)) / (2.0 * FD_STEP)
        })
        .collect()
}

fn scaled_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

/// Small planar layouts, none above 50 parameters.
fn oracle_arch(case: usize) -> ArchSpec {
    let (actions, history, hidden) = match case % 3 {
        0 => (1, 2, vec![2]),
        1 => (2, 1, vec![2]),
        _ => (1, 1, vec![]),
    };
    ArchSpec::new(6, ActionCoding::OneHot(actions), history, hidden)
        .with_frame(PlanarFrame { heading: 2, points: vec![(0, 1)], vectors: vec![(3, 4)] })
        .with_scale(vec![3.0, 3.0, 0.5, 2.0, 2.0, 1.0])
}

fn oracle_batch(arch: &ArchSpec, items: usize, len: usize, rng: &mut ChaCha8Rng) -> Result<Batch<f64>> {
    let n_actions = arch.n_actions();
    let state = |rng: &mut ChaCha8Rng| {
        vec![
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(0.0..1.0),
        ]
    };
    let items = (0..items)
        .map(|_| {
            let history = HistoryWindow::new((0..arch.history).map(|_| (state(rng), rng.random_range(0..n_actions))).collect());
            let mut targets = vec![history.last_state().to_vec()];
            targets.extend((0..len).map(|_| state(rng)));
            BatchItem { history, actions: (0..len).map(|_| rng.random_range(0..n_actions)).collect(), targets }
        })
        .collect();
    Batch::new(items, len)
}

/// Multistep-loss gradients and both meta-gradient orders against central
/// differences on seeded small networks.
pub fn gradient_oracle(cases: usize, seed: u64) -> Result<GradientOracle> {
    let alpha = 0.05;
    let mut out = GradientOracle { loss: 0.0, first_order: 0.0, second_order: 0.0, max_params: 0 };
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(case as u64));
        let arch = oracle_arch(case);
        out.max_params = out.max_params.max(arch.n_params());
        let params = ModelParams::<f64>::init(arch.clone(), rng.random())?;
        let len = rng.random_range(1..=3);
        let (a, e) = (oracle_batch(&arch, 2, len, &mut rng)?, oracle_batch(&arch, 2, len, &mut rng)?);
        let at = |t: &[f64]| ModelParams::new(arch.clone(), t.to_vec()).expect("same length");

        let (_, grad) = grad_multistep_loss(&params, &e)?;
        let fd = central_differences(|t| multistep_loss(&at(t), &e).unwrap_or(f64::NAN), &params.theta);
        out.loss = out.loss.max(scaled_err(&grad, &fd));

        // first order is the plain gradient at the adapted point
        let adapted = adapt(&params, &a, alpha)?;
        let first = meta_gradient(&params, &a, &e, alpha, Order::First)?;
        let fd = central_differences(|t| multistep_loss(&at(t), &e).unwrap_or(f64::NAN), &adapted.theta);
        out.first_order = out.first_order.max(scaled_err(&first, &fd));

        let second = meta_gradient(&params, &a, &e, alpha, Order::Second)?;
        let composite = |t: &[f64]| adapt(&at(t), &a, alpha).and_then(|p| multistep_loss(&p, &e)).unwrap_or(f64::NAN);
        let fd = central_differences(composite, &params.theta);
        out.second_order = out.second_order.max(scaled_err(&second, &fd));
    }
    if [out.loss, out.first_order, out.second_order].iter().any(|x| x.is_nan()) {
        return Err(Error::Empty("finite-difference evaluation"));
    }
    Ok(out)
}

fn tabular_only(cfg: &StreamConfig) -> Result<()> {
    match cfg.env {
        EnvStream::Tabular(_) => Ok(()),
        EnvStream::Drive(_) => Err(Error::config("env.kind", "this check needs a tabular stream")),
    }
}

fn min_slack<'a>(reports: impl IntoIterator<Item = &'a BoundReport>) -> f64 {
    reports.into_iter().map(|r| r.slack).fold(f64::INFINITY, f64::min)
}

/// Smallest slack of the Pinsker–Jensen chain, per round and per prefix,
/// over one tabular stream run.
pub fn chain_min_slack(cfg: &StreamConfig) -> Result<f64> {
    tabular_only(cfg)?;
    let run = run_tabular_stream(cfg)?;
    let cmp: Vec<Policy> = run.diagnostics.iter().map(|d| d.optimal.clone()).collect();
    let report = theorem_bound_check(&run.diagnostics, &cmp)?;
    Ok(min_slack(report.chain.iter().chain(&report.per_round)))
}

/// Smallest slack of the performance-difference bound (per round and per
/// prefix) over seeded runs of a tabular stream, against per-round optimal
/// policies.
pub fn perf_bound_min_slack(cfg: &StreamConfig, seeds: impl IntoIterator<Item = u64>) -> Result<f64> {
    tabular_only(cfg)?;
    let mut worst = f64::INFINITY;
    for seed in seeds {
        let run = run_tabular_stream(&StreamConfig { seed, ..cfg.clone() })?;
        let cmp: Vec<Policy> = run.diagnostics.iter().map(|d| d.optimal.clone()).collect();
        worst = worst.min(min_slack(&perf_bound_check(&run.diagnostics, &cmp)?));
        worst = worst.min(min_slack(&single_round_bound_check(&run.diagnostics, &cmp)?));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegretShape {
    /// Residual sums of squares of R(T) against log T and against T.
    pub log_rss: f64,
    pub linear_rss: f64,
    /// `R(2T) − R(T)` on the stationary stream.
    pub stationary_increments: Vec<f64>,
}

impl RegretShape {
    pub fn increments_nonincreasing(&self, tol: f64) -> bool {
        self.stationary_increments.windows(2).all(|w| w[1] <= w[0] + tol)
    }
}

/// FTML regret on the strongly convex toy stream at T = from, 2·from, …, to.
pub fn ftml_regret_shape(from: usize, to: usize, seed: u64) -> Result<RegretShape> {
    let drifting = ftml_toy_regret(&ToyStream::default(), to, seed)?;
    let (log_fit, linear_fit) = regret_shape(&doubling_points(&drifting, from, to))?;
    let stationary = doubling_points(&ftml_toy_regret(&ToyStream::stationary(ToyStream::default().dim), to, seed)?, from, to);
    let stationary_increments = stationary.windows(2).map(|w| w[1].1 - w[0].1).collect();
    Ok(RegretShape { log_rss: log_fit.rss, linear_rss: linear_fit.rss, stationary_increments })
}

/// Prefix means of the hindsight gap of a tabular stream, one per round.
pub fn hindsight_prefix_means(cfg: &StreamConfig) -> Result<Vec<f64>> {
    tabular_only(cfg)?;
    let gaps = hindsight_regret(&run_tabular_stream(cfg)?)?;
    Ok(running_mean(gaps.into_iter().map(Some)))
}

/// Mean policy-rollout cost over rounds `from..=T` (1-based); NaN when no
/// policy rollout happened there.
pub fn late_mean_cost(run: &DriveRun, from: usize) -> f64 {
    let late = running_mean(run.records.iter().filter(|r| r.round >= from).map(|r| r.policy_cost()));
    late.last().copied().unwrap_or(f64::NAN)
}

/// Final running cost and late-window cost of one variant on one seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariantScore {
    pub final_running: f64,
    pub late: f64,
    pub collisions: usize,
}

/// Runs each variant on each seed of a driving stream. Variants with the
/// same model architecture share one warm start per seed.
pub fn compare_variants(cfg: &StreamConfig, seeds: &[u64], variants: &[Variant], late_from: usize) -> Result<Vec<BTreeMap<&'static str, VariantScore>>> {
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut warm: BTreeMap<bool, ModelParams<f64>> = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for &variant in variants {
            let c = StreamConfig { seed, variant, ..cfg.clone() };
            let speed = variant == Variant::AdaptSpeed;
            if let std::collections::btree_map::Entry::Vacant(slot) = warm.entry(speed) {
                slot.insert(warm_start(&c)?);
            }
            let run = run_drive_stream_from(&c, warm[&speed].clone())?;
            let collisions = run.records.iter().map(|r| r.collisions).sum();
            let final_running = *run.running.last().ok_or(Error::Empty("stream"))?;
            scores.insert(variant.name(), VariantScore { final_running, late: late_mean_cost(&run, late_from), collisions });
        }
        out.push(scores);
    }
    Ok(out)
}

/// Metrics CSV bytes of a full run, the artifact the replay contract covers.
pub fn metrics_bytes(cfg: &StreamConfig) -> Result<Vec<u8>> {
    let run = run_stream(cfg)?;
    let mut out = Vec::new();
    write_metrics_csv(&mut out, &run.metrics(None))?;
    Ok(out)
}
