//! The online loop on the synthetic-driver stream.

use rand::Rng;

use super::{memory_window, running_mean, subseed, train_config, substream, Purpose, RoundRecord, Source, Trajectory};
use crate::config::{DriveStream, EnvStream, StreamConfig, Variant};
use crate::drivesim::{model_arch, DriverProfile, Env, Route, SimConstants, N_BASE, N_SPEEDS};
use crate::dynmodel::{adapt, meta_train, offline_warmstart, Batch, HistoryWindow, MetaRound, ModelParams, Transition};
use crate::error::{Error, Result};
use crate::planner::{MpcPolicy, PAD_ACTION};

pub type DriveRecord = RoundRecord<Transition<f64>>;
pub type DriveTrajectory = Trajectory<Transition<f64>>;

#[derive(Clone, Debug)]
pub struct DriveRun {
    pub config: StreamConfig,
    pub records: Vec<DriveRecord>,
    pub warm: ModelParams<f64>,
    /// Meta model after each round's update (the warm start for `explore`).
    pub snapshots: Vec<ModelParams<f64>>,
    pub running: Vec<f64>,
}

impl DriveRun {
    /// Meta model in effect while round `t` (1-based) was played.
    pub fn model_before(&self, t: usize) -> &ModelParams<f64> {
        if t <= 1 {
            &self.warm
        } else {
            &self.snapshots[t - 2]
        }
    }
}

fn drive_stream(cfg: &StreamConfig) -> Result<&DriveStream> {
    match &cfg.env {
        EnvStream::Drive(d) => Ok(d),
        EnvStream::Tabular(_) => Err(Error::config("env.kind", "expected a driving stream")),
    }
}

/// Action ids the planner searches for a variant.
pub fn action_set(variant: Variant) -> Vec<usize> {
    let n = if variant == Variant::AdaptSpeed { N_BASE * N_SPEEDS } else { N_BASE };
    (0..n).collect()
}

/// Driver of round `t` (1-based): each round pulls the previous driver towards
/// a fresh draw from the population by the stream's drift.
pub fn round_profile(cfg: &StreamConfig, t: usize) -> Result<DriverProfile> {
    let stream = drive_stream(cfg)?;
    let draw = |i: usize| DriverProfile::sample(&mut substream(cfg.seed, Purpose::Profile, i, 0), stream.speed_sensitive);
    let mut p = draw(0);
    for i in 1..=t {
        let fresh = draw(i);
        let w = stream.drift;
        let lerp = |a: f64, b: f64| a + w * (b - a);
        let switch = substream(cfg.seed, Purpose::Profile, i, 1).random::<f64>() < w;
        p = DriverProfile {
            reaction_delay: if switch { fresh.reaction_delay } else { p.reaction_delay },
            steering_gain: lerp(p.steering_gain, fresh.steering_gain),
            target_speed: lerp(p.target_speed, fresh.target_speed),
            compliance_noise: lerp(p.compliance_noise, fresh.compliance_noise),
            turn_radius: lerp(p.turn_radius, fresh.turn_radius),
            miss_prob: lerp(p.miss_prob, fresh.miss_prob),
            anticipation: lerp(p.anticipation, fresh.anticipation),
            speed_sensitive: stream.speed_sensitive,
        };
    }
    Ok(p)
}

/// The episode environment of round `round`, slot `k` (slot 0 is τ).
pub fn round_env(cfg: &StreamConfig, profile: &DriverProfile, round: usize, k: usize) -> Result<Env> {
    let consts = SimConstants::default();
    let route = Route::generate(subseed(cfg.seed, Purpose::Route, round, k), &consts);
    Env::new(route, profile.clone(), consts, substream(cfg.seed, Purpose::Driver, round, k))
}

/// Whether rollout `k` of round `round` follows the explore policy.
pub fn explore_coin(cfg: &StreamConfig, round: usize, k: usize) -> bool {
    substream(cfg.seed, Purpose::Coin, round, k).random::<f64>() < cfg.mix_prob
}

/// Drives one episode to the end, under the planner or the explore policy.
pub fn run_episode(mut env: Env, policy: Option<&MpcPolicy>, history: usize, round: usize, source: Source) -> Result<DriveTrajectory> {
    let mut window = HistoryWindow::padded(&env.state().to_vec(), history, PAD_ACTION);
    let mut traj = Trajectory { round, source, steps: Vec::new(), cost: 0.0, collisions: 0, missed_turns: 0 };
    while !env.done() {
        let instruction = match policy {
            Some(p) => p.act(&env, &window)?,
            None => env.explore_action(),
        };
        let state = env.state().to_vec();
        let out = env.step(instruction);
        let next_state = out.state.to_vec();
        window.push(instruction.id(), next_state.clone());
        traj.steps.push(Transition { state, action: instruction.id(), next_state });
        traj.cost += out.cost;
        traj.collisions += out.events.collision as usize;
        traj.missed_turns += out.events.missed_turn as usize;
    }
    Ok(traj)
}

/// Training windows of one episode.
pub fn to_batch(cfg: &StreamConfig, traj: &DriveTrajectory) -> Result<Batch<f64>> {
    Batch::from_transitions(&traj.steps, cfg.hyper.history, cfg.hyper.rollout_len, Some(PAD_ACTION))
}

fn merge(batches: Vec<Batch<f64>>, rollout_len: usize) -> Result<Batch<f64>> {
    Batch::new(batches.into_iter().flat_map(|b| b.items).collect(), rollout_len)
}

/// The round's FTML term: τ adapts, the rollouts are evaluated.
pub fn meta_round(cfg: &StreamConfig, tau: &DriveTrajectory, data: &[DriveTrajectory]) -> Result<MetaRound<f64>> {
    let batches = data.iter().map(|d| to_batch(cfg, d)).collect::<Result<Vec<_>>>()?;
    Ok(MetaRound { adapt: to_batch(cfg, tau)?, data: merge(batches, cfg.hyper.rollout_len)? })
}

/// Planner of round `round` given the meta model and the round's τ; `None`
/// for the explore variant.
pub fn round_planner(cfg: &StreamConfig, meta: &ModelParams<f64>, tau: &Batch<f64>) -> Result<Option<MpcPolicy>> {
    let plan = cfg.plan.plan_config(action_set(cfg.variant).len());
    Ok(match cfg.variant {
        Variant::Explore => None,
        Variant::SysId => Some(MpcPolicy::new(meta.clone(), plan)?),
        Variant::Adapt | Variant::AdaptSpeed => Some(MpcPolicy::new(adapt(meta, tau, cfg.hyper.alpha_adapt)?, plan)?),
    })
}

/// Meta model after round `round`, given every round's FTML term so far.
pub fn ftml_update(cfg: &StreamConfig, meta: &ModelParams<f64>, rounds: &[MetaRound<f64>], round: usize) -> Result<ModelParams<f64>> {
    let train = train_config(cfg, subseed(cfg.seed, Purpose::Train, round, 0));
    if cfg.variant == Variant::Explore || train.n_updates == 0 {
        return Ok(meta.clone());
    }
    meta_train(meta, &rounds[memory_window(round, cfg.hyper.memory_cap)], &train)
}

/// Offline explore data from drivers outside the stream, fitted plainly.
pub fn warm_start(cfg: &StreamConfig) -> Result<ModelParams<f64>> {
    let stream = drive_stream(cfg)?;
    let consts = SimConstants::default();
    let mut batches = Vec::new();
    for m in 0..stream.offline_rounds {
        let profile = DriverProfile::sample(&mut substream(cfg.seed, Purpose::OfflineProfile, m, 0), stream.speed_sensitive);
        for k in 0..stream.offline_rollouts {
            let route = Route::generate(subseed(cfg.seed, Purpose::OfflineRoute, m, k), &consts);
            let env = Env::new(route, profile.clone(), consts.clone(), substream(cfg.seed, Purpose::OfflineDriver, m, k))?;
            batches.push(to_batch(cfg, &run_episode(env, None, cfg.hyper.history, 0, Source::Explore)?)?);
        }
    }
    let arch = model_arch(cfg.variant == Variant::AdaptSpeed, cfg.hyper.history, cfg.hyper.hidden.clone());
    offline_warmstart(&batches, arch, &cfg.hyper.warm_config(subseed(cfg.seed, Purpose::Warm, 0, 0)))
}

pub fn run_drive_stream(cfg: &StreamConfig) -> Result<DriveRun> {
    cfg.validate()?;
    run_drive_stream_from(cfg, warm_start(cfg)?)
}

/// Runs the stream from a given warm-start model (shared across variants
/// with the same model architecture).
pub fn run_drive_stream_from(cfg: &StreamConfig, warm: ModelParams<f64>) -> Result<DriveRun> {
    cfg.validate()?;
    drive_stream(cfg)?;
    let speed = cfg.variant == Variant::AdaptSpeed;
    if warm.arch != model_arch(speed, cfg.hyper.history, cfg.hyper.hidden.clone()) {
        return Err(Error::Arch("warm-start model does not match the configured architecture".into()));
    }
    let mut meta = warm.clone();
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut snapshots = Vec::with_capacity(cfg.rounds);
    let mut meta_rounds: Vec<MetaRound<f64>> = Vec::new();
    for t in 1..=cfg.rounds {
        let mut round = || -> Result<DriveRecord> {
            let profile = round_profile(cfg, t)?;
            let tau = run_episode(round_env(cfg, &profile, t, 0)?, None, cfg.hyper.history, t, Source::Explore)?;
            let planner = round_planner(cfg, &meta, &to_batch(cfg, &tau)?)?;
            let mut data = Vec::with_capacity(cfg.rollouts);
            for k in 1..=cfg.rollouts {
                let source = if explore_coin(cfg, t, k) { Source::Explore } else { Source::Policy };
                let policy = if source == Source::Policy { planner.as_ref() } else { None };
                data.push(run_episode(round_env(cfg, &profile, t, k)?, policy, cfg.hyper.history, t, source)?);
            }
            meta_rounds.push(meta_round(cfg, &tau, &data)?);
            meta = ftml_update(cfg, &meta, &meta_rounds, t)?;
            Ok(RoundRecord::new(t, tau, data))
        };
        let record = round().map_err(|e| Error::Round { round: t, source: Box::new(e) })?;
        records.push(record);
        snapshots.push(meta.clone());
    }
    let running = running_mean(records.iter().map(|r| r.policy_cost()));
    Ok(DriveRun { config: cfg.clone(), records, warm, snapshots, running })
}

/// Gap per round between the run's policy cost and that of a hindsight meta
/// model trained on every round, replayed on the same episodes. Rounds
/// without policy rollouts give NaN.
pub fn hindsight_regret(run: &DriveRun) -> Result<Vec<f64>> {
    let cfg = &run.config;
    if cfg.variant == Variant::Explore {
        return Ok(vec![0.0; run.records.len()]);
    }
    let to_batches = |r: &DriveRecord| -> Result<(Batch<f64>, Vec<Batch<f64>>)> {
        Ok((to_batch(cfg, &r.tau)?, r.data.iter().map(|d| to_batch(cfg, d)).collect::<Result<_>>()?))
    };
    let all = run.records.iter().map(to_batches).collect::<Result<Vec<_>>>()?;
    let mut train = train_config(cfg, subseed(cfg.seed, Purpose::Hindsight, 0, 0));
    train.n_updates *= run.records.len();
    let rounds = all
        .iter()
        .map(|(a, d)| Ok(MetaRound { adapt: a.clone(), data: merge(d.clone(), cfg.hyper.rollout_len)? }))
        .collect::<Result<Vec<_>>>()?;
    let hindsight = meta_train(&run.warm, &rounds, &train)?;
    let plan = cfg.plan.plan_config(action_set(cfg.variant).len());
    let mut gaps = Vec::with_capacity(run.records.len());
    for (record, (adapt_batch, _)) in run.records.iter().zip(&all) {
        let t = record.round;
        let Some(adaptive) = record.policy_cost() else {
            gaps.push(f64::NAN);
            continue;
        };
        let model = if cfg.variant.adapts() { adapt(&hindsight, adapt_batch, cfg.hyper.alpha_adapt)? } else { hindsight.clone() };
        let policy = MpcPolicy::new(model, plan.clone())?;
        let profile = round_profile(cfg, t)?;
        let mut costs = Vec::new();
        for (k, d) in record.data.iter().enumerate() {
            if d.source == Source::Policy {
                let env = round_env(cfg, &profile, t, k + 1)?;
                costs.push(run_episode(env, Some(&policy), cfg.hyper.history, t, Source::Policy)?.cost);
            }
        }
        gaps.push(adaptive - costs.iter().sum::<f64>() / costs.len() as f64);
    }
    Ok(gaps)
}
