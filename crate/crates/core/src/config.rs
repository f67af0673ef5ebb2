//! Experiment description and its flat `key = value` text form.
//!
//! Keys are dotted (`hyper.alpha_meta`, `plan.horizon`); unknown keys are
//! rejected and missing keys keep their defaults. `to_text` is canonical, so
//! hashing it identifies a configuration.

use std::fmt::Display;
use std::str::FromStr;

use crate::dynmodel::{Optimizer, Order, TrainConfig};
use crate::error::{Error, Result};
use crate::planner::PlanConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Adapt,
    AdaptSpeed,
    SysId,
    Explore,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Adapt, Variant::AdaptSpeed, Variant::SysId, Variant::Explore];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Adapt => "adapt",
            Variant::AdaptSpeed => "adapt_speed",
            Variant::SysId => "sysid",
            Variant::Explore => "explore",
        }
    }

    /// Whether the planner uses a one-step adapted model.
    pub fn adapts(self) -> bool {
        matches!(self, Variant::Adapt | Variant::AdaptSpeed)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

/// Model and training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyper {
    pub alpha_adapt: f64,
    pub alpha_meta: f64,
    /// Multistep rollout length of the loss.
    pub rollout_len: usize,
    /// State-action pairs the model conditions on.
    pub history: usize,
    pub n_meta_updates: usize,
    pub batch: usize,
    pub rounds_per_update: usize,
    pub order: Order,
    pub optimizer: Optimizer,
    pub hidden: Vec<usize>,
    /// Plain training steps of the offline warm start.
    pub warm_updates: usize,
    pub warm_lr: f64,
    /// Keep only the most recent rounds in the FTML sum; `None` keeps all.
    pub memory_cap: Option<usize>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            alpha_adapt: 0.01,
            alpha_meta: 1e-3,
            rollout_len: 5,
            history: 5,
            n_meta_updates: 50,
            batch: 128,
            rounds_per_update: 4,
            order: Order::First,
            optimizer: Optimizer::Sgd,
            hidden: vec![256, 256, 256],
            warm_updates: 2000,
            warm_lr: 1e-3,
            memory_cap: None,
        }
    }
}

impl Hyper {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha_adapt: self.alpha_adapt,
            alpha_meta: self.alpha_meta,
            n_updates: self.n_meta_updates,
            batch: self.batch,
            rounds_per_update: self.rounds_per_update,
            order: self.order,
            optimizer: self.optimizer,
            seed,
        }
    }

    pub fn warm_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha_meta: self.warm_lr,
            n_updates: self.warm_updates,
            optimizer: Optimizer::adam(),
            ..self.train_config(seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanSettings {
    pub horizon: usize,
    pub residual_bonus: f64,
    pub turn_penalty: f64,
    pub beam: Option<usize>,
    pub anchored_goals: bool,
    pub route_mask: bool,
}

impl Default for PlanSettings {
    fn default() -> Self {
        let p = PlanConfig::default();
        Self {
            horizon: p.horizon,
            residual_bonus: p.residual_bonus,
            turn_penalty: p.turn_penalty,
            beam: p.beam,
            anchored_goals: p.anchored_goals,
            route_mask: true,
        }
    }
}

impl PlanSettings {
    pub fn plan_config(&self, n_actions: usize) -> PlanConfig {
        PlanConfig {
            residual_bonus: self.residual_bonus,
            turn_penalty: self.turn_penalty,
            beam: self.beam,
            anchored_goals: self.anchored_goals,
            route_mask: self.route_mask,
            ..PlanConfig::new(self.horizon, n_actions)
        }
    }
}

/// Synthetic-driver stream.
#[derive(Clone, Debug, PartialEq)]
pub struct DriveStream {
    pub offline_rounds: usize,
    /// Explore episodes per offline round.
    pub offline_rollouts: usize,
    /// Per-round pull of the driver towards a freshly drawn one, in [0, 1].
    pub drift: f64,
    pub speed_sensitive: bool,
}

impl Default for DriveStream {
    fn default() -> Self {
        Self { offline_rounds: 4, offline_rollouts: 4, drift: 0.5, speed_sensitive: false }
    }
}

/// Stream of random tabular MDPs sharing costs and start distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularStream {
    pub n_states: usize,
    pub n_actions: usize,
    pub offline_rounds: usize,
    /// Standard deviation of the per-round logit perturbation; 0 repeats one kernel.
    pub drift: f64,
}

impl Default for TabularStream {
    fn default() -> Self {
        Self { n_states: 5, n_actions: 3, offline_rounds: 1, drift: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvStream {
    Drive(DriveStream),
    Tabular(TabularStream),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub seed: u64,
    pub rounds: usize,
    pub rollouts: usize,
    /// Probability that a rollout follows the explore policy.
    pub mix_prob: f64,
    /// Episode horizon of tabular streams; driving episodes end on their own.
    pub horizon: usize,
    pub variant: Variant,
    pub env: EnvStream,
    pub hyper: Hyper,
    pub plan: PlanSettings,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 20,
            rollouts: 4,
            mix_prob: 0.5,
            horizon: 5,
            variant: Variant::Adapt,
            env: EnvStream::Drive(DriveStream::default()),
            hyper: Hyper::default(),
            plan: PlanSettings::default(),
        }
    }
}

impl StreamConfig {
    /// Defaults for a tabular stream: a tiny logit-table model trained hard.
    pub fn tabular() -> Self {
        Self {
            rounds: 20,
            rollouts: 10,
            env: EnvStream::Tabular(TabularStream::default()),
            hyper: Hyper {
                alpha_adapt: 0.05,
                alpha_meta: 2.0,
                n_meta_updates: 50,
                warm_updates: 50,
                warm_lr: 2.0,
                hidden: Vec::new(),
                ..Hyper::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stream.rounds", self.rounds),
            ("stream.rollouts", self.rollouts),
            ("stream.horizon", self.horizon),
            ("hyper.rollout_len", self.hyper.rollout_len),
            ("hyper.history", self.hyper.history),
            ("hyper.batch", self.hyper.batch),
            ("hyper.rounds_per_update", self.hyper.rounds_per_update),
            ("plan.horizon", self.plan.horizon),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if !(self.mix_prob > 0.0 && self.mix_prob < 1.0) {
            return Err(Error::config("stream.mix_prob", "must lie strictly between 0 and 1"));
        }
        let finite = [
            ("hyper.alpha_adapt", self.hyper.alpha_adapt),
            ("hyper.alpha_meta", self.hyper.alpha_meta),
            ("hyper.warm_lr", self.hyper.warm_lr),
            ("plan.residual_bonus", self.plan.residual_bonus),
            ("plan.turn_penalty", self.plan.turn_penalty),
        ];
        for (key, v) in finite {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        if self.hyper.memory_cap == Some(0) {
            return Err(Error::config("hyper.memory_cap", "must be at least 1"));
        }
        match &self.env {
            EnvStream::Drive(d) => {
                if !(0.0..=1.0).contains(&d.drift) {
                    return Err(Error::config("env.drift", "must lie in [0, 1]"));
                }
                if d.offline_rounds == 0 || d.offline_rollouts == 0 {
                    return Err(Error::config("env.offline_rounds", "warm start needs data"));
                }
            }
            EnvStream::Tabular(t) => {
                if t.n_states == 0 || t.n_actions == 0 {
                    return Err(Error::config("env.n_states", "must be at least 1"));
                }
                if !t.drift.is_finite() || t.drift < 0.0 {
                    return Err(Error::config("env.drift", "must be finite and non-negative"));
                }
                if self.variant == Variant::AdaptSpeed {
                    return Err(Error::config("stream.variant", "adapt_speed needs the driving stream"));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        let mut put = |k: &str, v: String| out.push(format!("{k} = {v}"));
        put("seed", self.seed.to_string());
        put("stream.rounds", self.rounds.to_string());
        put("stream.rollouts", self.rollouts.to_string());
        put("stream.mix_prob", float(self.mix_prob));
        put("stream.horizon", self.horizon.to_string());
        put("stream.variant", self.variant.name().into());
        match &self.env {
            EnvStream::Drive(d) => {
                put("env.kind", "drive".into());
                put("env.offline_rounds", d.offline_rounds.to_string());
                put("env.offline_rollouts", d.offline_rollouts.to_string());
                put("env.drift", float(d.drift));
                put("env.speed_sensitive", d.speed_sensitive.to_string());
            }
            EnvStream::Tabular(t) => {
                put("env.kind", "tabular".into());
                put("env.n_states", t.n_states.to_string());
                put("env.n_actions", t.n_actions.to_string());
                put("env.offline_rounds", t.offline_rounds.to_string());
                put("env.drift", float(t.drift));
            }
        }
        let h = &self.hyper;
        put("hyper.alpha_adapt", float(h.alpha_adapt));
        put("hyper.alpha_meta", float(h.alpha_meta));
        put("hyper.rollout_len", h.rollout_len.to_string());
        put("hyper.history", h.history.to_string());
        put("hyper.n_meta_updates", h.n_meta_updates.to_string());
        put("hyper.batch", h.batch.to_string());
        put("hyper.rounds_per_update", h.rounds_per_update.to_string());
        put("hyper.order", if h.order == Order::First { "first" } else { "second" }.into());
        put("hyper.optimizer", if h.optimizer == Optimizer::Sgd { "sgd" } else { "adam" }.into());
        put("hyper.hidden", h.hidden.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
        put("hyper.warm_updates", h.warm_updates.to_string());
        put("hyper.warm_lr", float(h.warm_lr));
        put("hyper.memory_cap", h.memory_cap.map_or("none".into(), |c| c.to_string()));
        let p = &self.plan;
        put("plan.horizon", p.horizon.to_string());
        put("plan.residual_bonus", float(p.residual_bonus));
        put("plan.turn_penalty", float(p.turn_penalty));
        put("plan.beam", p.beam.map_or("none".into(), |b| b.to_string()));
        put("plan.anchored_goals", p.anchored_goals.to_string());
        put("plan.route_mask", p.route_mask.to_string());
        out.join("\n") + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::config(line, "expected `key = value`"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let tabular = match pairs.iter().rev().find(|(k, _)| k == "env.kind").map(|(_, v)| v.as_str()) {
            None | Some("drive") => false,
            Some("tabular") => true,
            Some(other) => return Err(Error::config("env.kind", format!("unknown stream `{other}`"))),
        };
        let mut cfg = if tabular { Self::tabular() } else { Self::default() };
        for (key, value) in &pairs {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let h = &mut self.hyper;
        let p = &mut self.plan;
        match (key, &mut self.env) {
            ("seed", _) => self.seed = parse(key, value)?,
            ("stream.rounds", _) => self.rounds = parse(key, value)?,
            ("stream.rollouts", _) => self.rollouts = parse(key, value)?,
            ("stream.mix_prob", _) => self.mix_prob = parse(key, value)?,
            ("stream.horizon", _) => self.horizon = parse(key, value)?,
            ("stream.variant", _) => self.variant = value.parse()?,
            ("env.kind", EnvStream::Drive(_)) if value == "drive" => {}
            ("env.kind", EnvStream::Tabular(_)) if value == "tabular" => {}
            ("env.kind", _) => return Err(Error::config(key, "stream kind must be set before other env keys")),
            ("env.offline_rounds", EnvStream::Drive(d)) => d.offline_rounds = parse(key, value)?,
            ("env.offline_rounds", EnvStream::Tabular(t)) => t.offline_rounds = parse(key, value)?,
            ("env.offline_rollouts", EnvStream::Drive(d)) => d.offline_rollouts = parse(key, value)?,
            ("env.drift", EnvStream::Drive(d)) => d.drift = parse(key, value)?,
            ("env.drift", EnvStream::Tabular(t)) => t.drift = parse(key, value)?,
            ("env.speed_sensitive", EnvStream::Drive(d)) => d.speed_sensitive = parse(key, value)?,
            ("env.n_states", EnvStream::Tabular(t)) => t.n_states = parse(key, value)?,
            ("env.n_actions", EnvStream::Tabular(t)) => t.n_actions = parse(key, value)?,
            ("hyper.alpha_adapt", _) => h.alpha_adapt = parse(key, value)?,
            ("hyper.alpha_meta", _) => h.alpha_meta = parse(key, value)?,
            ("hyper.rollout_len", _) => h.rollout_len = parse(key, value)?,
            ("hyper.history", _) => h.history = parse(key, value)?,
            ("hyper.n_meta_updates", _) => h.n_meta_updates = parse(key, value)?,
            ("hyper.batch", _) => h.batch = parse(key, value)?,
            ("hyper.rounds_per_update", _) => h.rounds_per_update = parse(key, value)?,
            ("hyper.order", _) => {
                h.order = match value {
                    "first" => Order::First,
                    "second" => Order::Second,
                    _ => return Err(Error::config(key, format!("unknown order `{value}`"))),
                }
            }
            ("hyper.optimizer", _) => {
                h.optimizer = match value {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::adam(),
                    _ => return Err(Error::config(key, format!("unknown optimizer `{value}`"))),
                }
            }
            ("hyper.hidden", _) => {
                h.hidden = value
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(|t| parse(key, t))
                    .collect::<Result<_>>()?
            }
            ("hyper.warm_updates", _) => h.warm_updates = parse(key, value)?,
            ("hyper.warm_lr", _) => h.warm_lr = parse(key, value)?,
            ("hyper.memory_cap", _) => h.memory_cap = optional(key, value)?,
            ("plan.horizon", _) => p.horizon = parse(key, value)?,
            ("plan.residual_bonus", _) => p.residual_bonus = parse(key, value)?,
            ("plan.turn_penalty", _) => p.turn_penalty = parse(key, value)?,
            ("plan.beam", _) => p.beam = optional(key, value)?,
            ("plan.anchored_goals", _) => p.anchored_goals = parse(key, value)?,
            ("plan.route_mask", _) => p.route_mask = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key for this stream kind")),
        }
        Ok(())
    }
}

/// Shortest decimal that reads back to the same bits.
fn float(x: f64) -> String {
    format!("{x:?}")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| Error::config(key, format!("`{value}`: {e}")))
}

fn optional(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}
