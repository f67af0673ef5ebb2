//! One driving session with a human as the unknown dynamics. Each round is
//! an explore episode (τ) and `rollouts` further episodes; training runs
//! between episodes as a [`TrainJob`] the owner may execute anywhere.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ommbrl::config::{EnvStream, StreamConfig, Variant};
use ommbrl::drivesim::{instruction_gate, model_arch, Controls, DriverProfile, Env, Instruction, SimState};
use ommbrl::dynmodel::{load_checkpoint, save_checkpoint, CheckpointInfo, HistoryWindow, MetaRound, ModelParams, Transition};
use ommbrl::online::drive::{explore_coin, ftml_update, meta_round, round_env, round_planner, round_profile, to_batch, DriveRecord, DriveTrajectory};
use ommbrl::online::{RoundRecord, Source, Trajectory};
use ommbrl::planner::{MpcPolicy, PAD_ACTION};

use crate::error::{Result, ServiceError};
use crate::protocol::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Collecting the round's adaptation episode τ.
    Exploring,
    /// Rollouts of the round, each under the planner or the explore policy.
    Driving,
    /// Waiting for a training job.
    BetweenEpisodes,
}

pub enum TrainResult {
    Planner(Option<MpcPolicy>),
    Meta(ModelParams<f64>),
}

/// Training work detached from the session; it owns copies of everything it reads.
pub struct TrainJob(Box<dyn FnOnce() -> ommbrl::Result<TrainResult> + Send>);

impl TrainJob {
    pub fn run(self) -> Result<TrainResult> {
        Ok((self.0)()?)
    }
}

/// What happened on a tick boundary.
pub struct Advance {
    pub frames: Vec<Frame>,
    pub job: Option<TrainJob>,
}

struct Episode {
    env: Env,
    window: HistoryWindow<f64>,
    traj: DriveTrajectory,
    costs: Vec<f64>,
    /// Instruction shown for the current tick with its play flag.
    shown: Option<(Instruction, bool)>,
    previous: Instruction,
    repeats: usize,
}

pub struct Session {
    id: String,
    cfg: StreamConfig,
    meta: ModelParams<f64>,
    planner: Option<MpcPolicy>,
    round: usize,
    /// 0 is τ, then the rollouts 1..=K.
    slot: usize,
    phase: Phase,
    profile: DriverProfile,
    episode: Option<Episode>,
    tau: Option<DriveTrajectory>,
    data: Vec<DriveTrajectory>,
    meta_rounds: Vec<MetaRound<f64>>,
    records: Vec<DriveRecord>,
    controls: Controls,
    tick: u64,
}

impl Session {
    pub fn new(id: impl Into<String>, cfg: StreamConfig, meta: ModelParams<f64>) -> Result<Self> {
        Self::starting_at(id.into(), cfg, meta, 1)
    }

    fn starting_at(id: String, cfg: StreamConfig, meta: ModelParams<f64>, round: usize) -> Result<Self> {
        cfg.validate()?;
        if !matches!(cfg.env, EnvStream::Drive(_)) {
            return Err(ommbrl::Error::config("env.kind", "sessions drive").into());
        }
        if meta.arch != model_arch(cfg.variant == Variant::AdaptSpeed, cfg.hyper.history, cfg.hyper.hidden.clone()) {
            return Err(ommbrl::Error::Arch("model does not match the configured architecture".into()).into());
        }
        let profile = round_profile(&cfg, round)?;
        let mut s = Self {
            id,
            cfg,
            meta,
            planner: None,
            round,
            slot: 0,
            phase: Phase::Exploring,
            profile,
            episode: None,
            tau: None,
            data: Vec::new(),
            meta_rounds: Vec::new(),
            records: Vec::new(),
            controls: Controls::default(),
            tick: 0,
        };
        s.start_episode()?;
        Ok(s)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    /// Index of the tick the next frame describes.
    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    pub fn meta(&self) -> &ModelParams<f64> {
        &self.meta
    }

    pub fn records(&self) -> &[DriveRecord] {
        &self.records
    }

    pub fn state(&self) -> Option<&SimState> {
        self.episode.as_ref().map(|e| e.env.state())
    }

    fn source(&self) -> Source {
        if self.slot == 0 || explore_coin(&self.cfg, self.round, self.slot) {
            Source::Explore
        } else {
            Source::Policy
        }
    }

    fn start_episode(&mut self) -> Result<()> {
        let env = round_env(&self.cfg, &self.profile, self.round, self.slot)?;
        let window = HistoryWindow::padded(&env.state().to_vec(), self.cfg.hyper.history, PAD_ACTION);
        let traj = Trajectory { round: self.round, source: self.source(), steps: Vec::new(), cost: 0.0, collisions: 0, missed_turns: 0 };
        self.episode = Some(Episode { env, window, traj, costs: Vec::new(), shown: None, previous: Instruction::NONE, repeats: 0 });
        self.phase = if self.slot == 0 { Phase::Exploring } else { Phase::Driving };
        Ok(())
    }

    /// Drops a partly driven episode and starts it over, as after a reconnect.
    pub fn restart_episode(&mut self) -> Result<()> {
        if self.phase != Phase::BetweenEpisodes {
            self.controls = Controls::default();
            self.start_episode()?;
        }
        Ok(())
    }

    /// State and instruction of the current tick; `None` while training.
    pub fn tick_frame(&mut self) -> Result<Option<Frame>> {
        let planner = if self.source() == Source::Policy { self.planner.as_ref() } else { None };
        let gate_limit = self.profile_gate();
        let Some(ep) = self.episode.as_mut() else { return Ok(None) };
        let (instruction, play) = match ep.shown {
            Some(shown) => shown,
            None => {
                let instruction = match planner {
                    Some(p) => p.act(&ep.env, &ep.window)?,
                    None => ep.env.explore_action(),
                };
                let (play, repeats) = instruction_gate(instruction, ep.previous, ep.repeats, gate_limit);
                ep.previous = instruction;
                ep.repeats = repeats;
                ep.shown = Some((instruction, play));
                (instruction, play)
            }
        };
        Ok(Some(Frame::tick(self.tick, ep.env.state(), instruction, play)))
    }

    fn profile_gate(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.env.consts.gate_repeat)
    }

    /// Latest controls win; inputs may not come from the future.
    pub fn set_input(&mut self, t: u64, controls: Controls) -> Result<()> {
        if t > self.tick {
            return Err(ServiceError::Unexpected(format!("input for tick {t} ahead of tick {}", self.tick)));
        }
        self.controls = controls;
        Ok(())
    }

    /// Applies the latest controls for one simulated second.
    pub fn advance(&mut self) -> Result<Advance> {
        if self.episode.as_ref().is_some_and(|e| e.shown.is_none()) {
            self.tick_frame()?;
        }
        let Some(ep) = self.episode.as_mut() else {
            return Ok(Advance { frames: Vec::new(), job: None });
        };
        let (instruction, _) = ep.shown.take().expect("instruction chosen above");
        let state = ep.env.state().to_vec();
        let out = ep.env.step_manual(self.controls);
        let next_state = out.state.to_vec();
        ep.window.push(instruction.id(), next_state.clone());
        ep.traj.steps.push(Transition { state, action: instruction.id(), next_state });
        ep.traj.cost += out.cost;
        ep.traj.collisions += out.events.collision as usize;
        ep.traj.missed_turns += out.events.missed_turn as usize;
        ep.costs.push(out.cost);
        self.tick += 1;
        if !out.done {
            return Ok(Advance { frames: Vec::new(), job: None });
        }
        let ep = self.episode.take().expect("episode in progress");
        let mut frames = vec![Frame::EpisodeEnd { costs: ep.costs, collisions: ep.traj.collisions, missed_turns: ep.traj.missed_turns }];
        self.phase = Phase::BetweenEpisodes;
        let job = if self.slot == 0 {
            let batch = to_batch(&self.cfg, &ep.traj)?;
            self.tau = Some(ep.traj);
            let (cfg, meta) = (self.cfg.clone(), self.meta.clone());
            Some(TrainJob(Box::new(move || round_planner(&cfg, &meta, &batch).map(TrainResult::Planner))))
        } else {
            self.data.push(ep.traj);
            if self.slot < self.cfg.rollouts {
                self.slot += 1;
                self.start_episode()?;
                None
            } else {
                let tau = self.tau.take().expect("τ precedes the rollouts");
                let data = std::mem::take(&mut self.data);
                self.meta_rounds.push(meta_round(&self.cfg, &tau, &data)?);
                self.records.push(RoundRecord::new(self.round, tau, data));
                frames.push(Frame::RoundEnd { kl_estimate_unavailable: true, regret_gap_if_available: None });
                let (cfg, meta, rounds, round) = (self.cfg.clone(), self.meta.clone(), self.meta_rounds.clone(), self.round);
                Some(TrainJob(Box::new(move || ftml_update(&cfg, &meta, &rounds, round).map(TrainResult::Meta))))
            }
        };
        Ok(Advance { frames, job })
    }

    /// Swaps in a finished job's result and starts the next episode.
    pub fn install(&mut self, result: TrainResult) -> Result<()> {
        if self.phase != Phase::BetweenEpisodes {
            return Err(ServiceError::Unexpected("training result outside an episode boundary".into()));
        }
        match result {
            TrainResult::Planner(p) => {
                self.planner = p;
                self.slot = 1;
            }
            TrainResult::Meta(m) => {
                self.meta = m;
                self.planner = None;
                self.round += 1;
                self.slot = 0;
                self.profile = round_profile(&self.cfg, self.round)?;
            }
        }
        self.start_episode()
    }

    fn paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{id}.ckpt")), dir.join(format!("{id}.round")))
    }

    /// Saves the meta model and the round in progress. The FTML history
    /// itself is not saved; a resumed session continues from this model.
    pub fn checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (model, round) = Self::paths(dir, &self.id);
        let info = CheckpointInfo { rollout_len: self.cfg.hyper.rollout_len, seed: self.cfg.seed };
        save_checkpoint(fs::File::create(model)?, &self.meta, &info)?;
        fs::write(round, format!("{}\n", self.round))?;
        Ok(())
    }

    /// Reopens a checkpointed session at the start of its round, if one exists.
    pub fn resume(dir: &Path, id: &str, cfg: StreamConfig) -> Result<Option<Self>> {
        let (model, round) = Self::paths(dir, id);
        if !model.exists() || !round.exists() {
            return Ok(None);
        }
        let (meta, _) = load_checkpoint(BufReader::new(fs::File::open(model)?))?;
        let round: usize = fs::read_to_string(round)?
            .trim()
            .parse()
            .map_err(|e| ommbrl::Error::Checkpoint(format!("round file: {e}")))?;
        Ok(Some(Self::starting_at(id.to_string(), cfg, meta, round.max(1))?))
    }
}
