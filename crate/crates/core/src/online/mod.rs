//! The online loop: warm start, one-shot adaptation per round, planning,
//! mixture data collection and follow-the-meta-leader updates.

pub mod drive;
pub mod tabular;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EnvStream, StreamConfig, Variant};
use crate::dynmodel::TrainConfig;
use crate::error::Result;

pub use drive::{run_drive_stream, DriveRecord, DriveRun};
pub use tabular::{run_tabular_stream, LogitModel, TabularDiagnostics, TabularRecord, TabularRun};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Explore,
    Policy,
}

/// One episode. `T` is the step type: a model transition or an `(s, a, s')` triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub round: usize,
    pub source: Source,
    pub steps: Vec<T>,
    pub cost: f64,
    pub collisions: usize,
    pub missed_turns: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord<T> {
    /// 1-based round index.
    pub round: usize,
    pub tau: Trajectory<T>,
    pub data: Vec<Trajectory<T>>,
    pub episode_costs: Vec<f64>,
    /// Counted over the round's policy rollouts.
    pub collisions: usize,
    pub missed_turns: usize,
    pub model_snapshot: String,
}

impl<T> RoundRecord<T> {
    pub fn new(round: usize, tau: Trajectory<T>, data: Vec<Trajectory<T>>) -> Self {
        let policy = data.iter().filter(|d| d.source == Source::Policy);
        let collisions = policy.clone().map(|d| d.collisions).sum();
        let missed_turns = policy.map(|d| d.missed_turns).sum();
        Self {
            round,
            episode_costs: data.iter().map(|d| d.cost).collect(),
            tau,
            data,
            collisions,
            missed_turns,
            model_snapshot: snapshot_id(round),
        }
    }

    /// Mean cost of the round's policy rollouts, if the coin produced any.
    pub fn policy_cost(&self) -> Option<f64> {
        let costs: Vec<f64> = self.data.iter().filter(|d| d.source == Source::Policy).map(|d| d.cost).collect();
        (!costs.is_empty()).then(|| costs.iter().sum::<f64>() / costs.len() as f64)
    }
}

pub fn snapshot_id(round: usize) -> String {
    format!("round-{round:03}")
}

/// Running mean of per-round policy cost. Rounds whose coin produced no
/// policy rollout are left out of the mean; before the first such round the
/// value is NaN.
pub fn running_performance<T>(records: &[RoundRecord<T>]) -> Vec<f64> {
    running_mean(records.iter().map(|r| r.policy_cost()))
}

/// Prefix means over the defined entries of `values`.
pub fn running_mean(values: impl IntoIterator<Item = Option<f64>>) -> Vec<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    values
        .into_iter()
        .map(|v| {
            if let Some(v) = v.filter(|v| !v.is_nan()) {
                sum += v;
                n += 1;
            }
            if n == 0 {
                f64::NAN
            } else {
                sum / n as f64
            }
        })
        .collect()
}

/// A finished run of either stream kind.
#[derive(Clone, Debug)]
pub enum StreamRun {
    Drive(DriveRun),
    Tabular(TabularRun),
}

pub fn run_stream(cfg: &StreamConfig) -> Result<StreamRun> {
    Ok(match cfg.env {
        EnvStream::Drive(_) => StreamRun::Drive(run_drive_stream(cfg)?),
        EnvStream::Tabular(_) => StreamRun::Tabular(run_tabular_stream(cfg)?),
    })
}

impl StreamRun {
    pub fn variant(&self) -> Variant {
        match self {
            StreamRun::Drive(r) => r.config.variant,
            StreamRun::Tabular(r) => r.config.variant,
        }
    }

    pub fn running(&self) -> &[f64] {
        match self {
            StreamRun::Drive(r) => &r.running,
            StreamRun::Tabular(r) => &r.running,
        }
    }

    /// Per-round metrics; `gaps` fills the regret column when available.
    pub fn metrics(&self, gaps: Option<&[f64]>) -> Vec<MetricsRow> {
        let variant = self.variant();
        let gap = |i: usize| gaps.and_then(|g| g.get(i).copied());
        match self {
            StreamRun::Drive(run) => run
                .records
                .iter()
                .enumerate()
                .map(|(i, r)| MetricsRow {
                    round: r.round,
                    variant,
                    mean_cost: r.policy_cost(),
                    j_running: run.running[i],
                    collisions: r.collisions,
                    missed_turns: r.missed_turns,
                    kl_error: None,
                    l1_error: None,
                    coverage_max: None,
                    regret_gap: gap(i),
                })
                .collect(),
            StreamRun::Tabular(run) => run
                .records
                .iter()
                .zip(&run.diagnostics)
                .enumerate()
                .map(|(i, (r, d))| MetricsRow {
                    round: r.round,
                    variant,
                    mean_cost: r.policy_cost(),
                    j_running: run.running[i],
                    collisions: 0,
                    missed_turns: 0,
                    kl_error: Some(d.kl),
                    l1_error: Some(d.l1),
                    coverage_max: Some(d.coverage_optimal),
                    regret_gap: gap(i),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub variant: Variant,
    pub mean_cost: Option<f64>,
    pub j_running: f64,
    pub collisions: usize,
    pub missed_turns: usize,
    pub kl_error: Option<f64>,
    pub l1_error: Option<f64>,
    pub coverage_max: Option<f64>,
    pub regret_gap: Option<f64>,
}

pub const METRICS_HEADER: [&str; 10] = [
    "round",
    "variant",
    "mean_cost",
    "J_running",
    "collisions",
    "missed_turns",
    "kl_error",
    "l1_error",
    "coverage_max",
    "regret_gap",
];

/// Writes metrics as CSV; undefined values are empty cells.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let cell = |v: Option<f64>| v.filter(|x| !x.is_nan()).map_or(String::new(), |x| format!("{x:?}"));
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in rows {
        out.write_record([
            r.round.to_string(),
            r.variant.name().to_string(),
            cell(r.mean_cost),
            cell(Some(r.j_running)),
            r.collisions.to_string(),
            r.missed_turns.to_string(),
            cell(r.kl_error),
            cell(r.l1_error),
            cell(r.coverage_max),
            cell(r.regret_gap),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Independent random streams keyed by purpose and indices, so that e.g. the
/// mixture coins never shift the environment draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub(crate) enum Purpose {
    Profile = 1,
    Route,
    Driver,
    Coin,
    Train,
    OfflineProfile,
    OfflineRoute,
    OfflineDriver,
    Warm,
    Kernel,
    Episode,
    Hindsight,
}

pub(crate) fn substream(seed: u64, purpose: Purpose, a: usize, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ ((a as u64) << 28) ^ b as u64);
    rng
}

pub(crate) fn subseed(seed: u64, purpose: Purpose, a: usize, b: usize) -> u64 {
    use rand::Rng;
    substream(seed, purpose, a, b).random()
}

/// The FTML update of the configured variant. SysID runs the same update
/// with a zero adaptation step, so its models predict next states directly.
pub(crate) fn train_config(cfg: &StreamConfig, seed: u64) -> TrainConfig {
    let train = cfg.hyper.train_config(seed);
    if cfg.variant.adapts() {
        train
    } else {
        TrainConfig { alpha_adapt: 0.0, ..train }
    }
}

/// Rounds the FTML sum runs over after round `t` (all of them unless capped).
pub(crate) fn memory_window(t: usize, cap: Option<usize>) -> std::ops::Range<usize> {
    let start = cap.map_or(0, |c| t.saturating_sub(c));
    start..t
}
