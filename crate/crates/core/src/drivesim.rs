//! Planar driving environment: procedural Manhattan routes, a kinematic
//! vehicle, and a synthetic driver who follows spoken navigation
//! instructions with delay, noise and occasional lapses.
//!
//! Every magnitude here is a stand-in chosen for desk-scale experiments and
//! lives in [`SimConstants`] or [`DriverProfile`].

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dynmodel::{ActionCoding, ArchSpec, PlanarFrame};
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 14;
pub const N_BASE: usize = 7;
pub const N_SPEEDS: usize = 3;

/// Field offsets in the flat state vector.
pub mod field {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const Z: usize = 2;
    pub const VX: usize = 3;
    pub const VY: usize = 4;
    pub const VZ: usize = 5;
    pub const HEADING: usize = 6;
    pub const INDICATOR: usize = 7;
    pub const ROUNDABOUT: usize = 8;
    pub const WP_X: usize = 9;
    pub const WP_Y: usize = 10;
    pub const STEER: usize = 11;
    pub const REVERSE: usize = 12;
    pub const BRAKE: usize = 13;
}

pub const FIELD_NAMES: [&str; STATE_DIM] = [
    "x", "y", "z", "vx", "vy", "vz", "heading", "junction_indicator", "at_roundabout", "wp_x", "wp_y", "steer", "reverse",
    "brake",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SimConstants {
    pub dt: f64,
    pub substeps: usize,
    pub lane_half_width: f64,
    pub prepare_distance: f64,
    pub turn_distance: f64,
    pub slower: f64,
    pub faster: f64,
    pub roundabout_radius: f64,
    /// Distance past an uncommitted junction that counts as a missed turn.
    pub miss_distance: f64,
    /// Distance past an uncommitted junction at which the driver notices and turns anyway.
    pub recover_distance: f64,
    pub lookahead: f64,
    pub accel: f64,
    pub decel: f64,
    /// Speed cap while the heading error is large (cornering).
    pub corner_speed: f64,
    pub segments: (usize, usize),
    pub turns: (usize, usize),
    pub segment_length: (f64, f64),
    pub roundabout_prob: f64,
    pub gate_repeat: usize,
    /// Manual driving: maximum yaw rate per unit steer at 1 m/s.
    pub manual_turn_radius: f64,
    pub max_distance: f64,
}

impl Default for SimConstants {
    fn default() -> Self {
        Self {
            dt: 1.0,
            substeps: 10,
            lane_half_width: 3.5,
            prepare_distance: 30.0,
            turn_distance: 10.0,
            slower: 0.7,
            faster: 1.3,
            roundabout_radius: 15.0,
            miss_distance: 5.0,
            recover_distance: 15.0,
            lookahead: 4.0,
            accel: 3.0,
            decel: 5.0,
            corner_speed: 4.0,
            segments: (8, 16),
            turns: (3, 6),
            segment_length: (40.0, 80.0),
            roundabout_prob: 0.2,
            gate_repeat: 15,
            manual_turn_radius: 5.0,
            max_distance: 700.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaseInstruction {
    NoInstruction = 0,
    TurnLeft = 1,
    TurnRight = 2,
    PrepareTurnLeft = 3,
    PrepareTurnRight = 4,
    EnterRoundabout = 5,
    KeepLeft = 6,
}

impl BaseInstruction {
    pub const ALL: [BaseInstruction; N_BASE] = [
        BaseInstruction::NoInstruction,
        BaseInstruction::TurnLeft,
        BaseInstruction::TurnRight,
        BaseInstruction::PrepareTurnLeft,
        BaseInstruction::PrepareTurnRight,
        BaseInstruction::EnterRoundabout,
        BaseInstruction::KeepLeft,
    ];

    pub fn is_turn(self) -> bool {
        matches!(self, BaseInstruction::TurnLeft | BaseInstruction::TurnRight)
    }

    pub fn text(self) -> &'static str {
        match self {
            BaseInstruction::NoInstruction => "",
            BaseInstruction::TurnLeft => "Turn left",
            BaseInstruction::TurnRight => "Turn right",
            BaseInstruction::PrepareTurnLeft => "Prepare to turn left",
            BaseInstruction::PrepareTurnRight => "Prepare to turn right",
            BaseInstruction::EnterRoundabout => "Enter the roundabout",
            BaseInstruction::KeepLeft => "Keep left",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Speed {
    #[default]
    Normal = 0,
    Slower = 1,
    Faster = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub base: BaseInstruction,
    pub speed: Speed,
}

impl Instruction {
    pub const NONE: Instruction = Instruction { base: BaseInstruction::NoInstruction, speed: Speed::Normal };

    pub fn normal(base: BaseInstruction) -> Self {
        Self { base, speed: Speed::Normal }
    }

    /// `base + 7 · speed`; ids below 7 are the normal-speed instructions.
    pub fn id(self) -> usize {
        self.base as usize + N_BASE * self.speed as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        let base = *BaseInstruction::ALL.get(id % N_BASE)?;
        let speed = match id / N_BASE {
            0 => Speed::Normal,
            1 => Speed::Slower,
            2 => Speed::Faster,
            _ => return None,
        };
        Some(Self { base, speed })
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{:?}", self.base, self.speed)
    }
}

/// Audio gate: play on change, or after `repeat_limit` silent repeats.
/// Returns the play flag and the updated repeat counter.
pub fn instruction_gate(current: Instruction, previous: Instruction, repeat_count: usize, repeat_limit: usize) -> (bool, usize) {
    if current != previous || repeat_count >= repeat_limit {
        (true, 0)
    } else {
        (false, repeat_count + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TurnDir {
    Left,
    Right,
}

impl TurnDir {
    fn sign(self) -> f64 {
        match self {
            TurnDir::Left => 1.0,
            TurnDir::Right => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Junction {
    /// Index into the route's waypoints.
    pub waypoint: usize,
    pub dir: TurnDir,
    pub roundabout: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub waypoints: Vec<(f64, f64)>,
    pub junctions: Vec<Junction>,
    cumulative: Vec<f64>,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = a - 2.0 * PI * ((a - PI) / (2.0 * PI)).ceil();
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

impl Route {
    pub fn new(waypoints: Vec<(f64, f64)>, junctions: Vec<Junction>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::Shape("route needs at least two waypoints".into()));
        }
        if junctions.windows(2).any(|w| w[0].waypoint >= w[1].waypoint) {
            return Err(Error::Shape("junction indices must increase".into()));
        }
        if junctions.iter().any(|j| j.waypoint == 0 || j.waypoint + 1 >= waypoints.len()) {
            return Err(Error::Shape("junctions must be interior waypoints".into()));
        }
        let mut cumulative = vec![0.0];
        for w in waypoints.windows(2) {
            let last = cumulative[cumulative.len() - 1];
            cumulative.push(last + dist(w[0], w[1]));
        }
        Ok(Self { waypoints, junctions, cumulative })
    }

    /// Seeded Manhattan route starting at the origin heading `+x`.
    pub fn generate(seed: u64, consts: &SimConstants) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_seg = rng.random_range(consts.segments.0..=consts.segments.1);
        let n_turns = rng.random_range(consts.turns.0..=consts.turns.1.min(n_seg - 1));
        let mut interior: Vec<usize> = (1..n_seg).collect();
        let mut turn_at = Vec::with_capacity(n_turns);
        for _ in 0..n_turns {
            let k = rng.random_range(0..interior.len());
            turn_at.push(interior.swap_remove(k));
        }
        turn_at.sort_unstable();
        let mut heading: f64 = 0.0;
        let mut pos = (0.0, 0.0);
        let mut waypoints = vec![pos];
        let mut junctions = Vec::new();
        for i in 0..n_seg {
            if i > 0 && turn_at.contains(&i) {
                let dir = if rng.random::<bool>() { TurnDir::Left } else { TurnDir::Right };
                let roundabout = rng.random::<f64>() < consts.roundabout_prob;
                heading += dir.sign() * FRAC_PI_2;
                junctions.push(Junction { waypoint: i, dir, roundabout });
            }
            let len = rng.random_range(consts.segment_length.0..consts.segment_length.1).round();
            pos = (pos.0 + len * heading.cos().round(), pos.1 + len * heading.sin().round());
            waypoints.push(pos);
        }
        Self::new(waypoints, junctions).expect("generator builds valid routes")
    }

    pub fn length(&self) -> f64 {
        self.cumulative[self.cumulative.len() - 1]
    }

    pub fn goal(&self) -> (f64, f64) {
        self.waypoints[self.waypoints.len() - 1]
    }

    fn segment_dir(&self, i: usize) -> (f64, f64) {
        let (a, b) = (self.waypoints[i], self.waypoints[i + 1]);
        let l = dist(a, b).max(1e-12);
        ((b.0 - a.0) / l, (b.1 - a.1) / l)
    }

    pub fn n_segments(&self) -> usize {
        self.waypoints.len() - 1
    }

    /// Point at arc length `s` (clamped to the route).
    pub fn point_at(&self, s: f64) -> (f64, f64) {
        let s = s.clamp(0.0, self.length());
        let i = self.cumulative.partition_point(|c| *c <= s).saturating_sub(1).min(self.n_segments() - 1);
        let (a, d) = (self.waypoints[i], self.segment_dir(i));
        let u = s - self.cumulative[i];
        (a.0 + d.0 * u, a.1 + d.1 * u)
    }

    /// Closest point on segment `i`: (arc length, distance).
    fn project_segment(&self, i: usize, p: (f64, f64)) -> (f64, f64) {
        let (a, d) = (self.waypoints[i], self.segment_dir(i));
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let u = ((p.0 - a.0) * d.0 + (p.1 - a.1) * d.1).clamp(0.0, len);
        let q = (a.0 + d.0 * u, a.1 + d.1 * u);
        (self.cumulative[i] + u, dist(p, q))
    }

    /// Projection searched around segment `hint`; returns (arc length, distance, segment).
    pub fn project(&self, p: (f64, f64), hint: usize) -> (f64, f64, usize) {
        let lo = hint.saturating_sub(1);
        let hi = (hint + 2).min(self.n_segments() - 1);
        let mut best = (0.0, f64::INFINITY, hint);
        for i in lo..=hi {
            let (s, d) = self.project_segment(i, p);
            if d < best.1 - 1e-12 {
                best = (s, d, i);
            }
        }
        best
    }

    /// First junction at or after waypoint `from`.
    pub fn junction_from(&self, from: usize) -> Option<Junction> {
        self.junctions.iter().copied().find(|j| j.waypoint >= from)
    }

    /// Upcoming junction and its arc-length distance from route position `s`.
    pub fn junction_ahead(&self, s: f64) -> Option<(Junction, f64)> {
        self.junctions
            .iter()
            .copied()
            .find(|j| self.cumulative[j.waypoint] > s + 1e-9)
            .map(|j| (j, self.cumulative[j.waypoint] - s))
    }

    pub fn arc_length_of(&self, waypoint: usize) -> f64 {
        self.cumulative[waypoint]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "waypoints = {}\n",
            self.waypoints.iter().map(|(x, y)| format!("{x:?},{y:?}")).collect::<Vec<_>>().join(" ")
        ));
        out.push_str(&format!(
            "junctions = {}\n",
            self.junctions
                .iter()
                .map(|j| format!(
                    "{}:{}{}",
                    j.waypoint,
                    if j.dir == TurnDir::Left { "left" } else { "right" },
                    if j.roundabout { ":roundabout" } else { "" }
                ))
                .collect::<Vec<_>>()
                .join(" ")
        ));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut waypoints = Vec::new();
        let mut junctions = Vec::new();
        let bad = |k: &str, d: &str| Error::config(k, d);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(line, "expected `key = value`"))?;
            match key.trim() {
                "waypoints" => {
                    for tok in value.split_whitespace() {
                        let (x, y) = tok.split_once(',').ok_or_else(|| bad("waypoints", tok))?;
                        let p = |s: &str| s.parse::<f64>().map_err(|e| bad("waypoints", &e.to_string()));
                        waypoints.push((p(x)?, p(y)?));
                    }
                }
                "junctions" => {
                    for tok in value.split_whitespace() {
                        let mut parts = tok.split(':');
                        let idx = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("junctions", tok))?;
                        let dir = match parts.next() {
                            Some("left") => TurnDir::Left,
                            Some("right") => TurnDir::Right,
                            _ => return Err(bad("junctions", tok)),
                        };
                        let roundabout = parts.next() == Some("roundabout");
                        junctions.push(Junction { waypoint: idx, dir, roundabout });
                    }
                }
                other => return Err(bad(other, "unknown key")),
            }
        }
        Self::new(waypoints, junctions)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriverProfile {
    pub reaction_delay: usize,
    pub steering_gain: f64,
    pub target_speed: f64,
    /// Standard deviation of the per-step heading perturbation (radians).
    pub compliance_noise: f64,
    pub turn_radius: f64,
    pub miss_prob: f64,
    /// How far before a junction the driver starts turning once told to.
    pub anticipation: f64,
    /// Whether the driver reacts to the speed variant of instructions.
    pub speed_sensitive: bool,
}

impl Default for DriverProfile {
    /// A perfect driver: no delay, noise or lapses.
    fn default() -> Self {
        Self {
            reaction_delay: 0,
            steering_gain: 2.0,
            target_speed: 8.0,
            compliance_noise: 0.0,
            turn_radius: 5.0,
            miss_prob: 0.0,
            anticipation: 6.0,
            speed_sensitive: false,
        }
    }
}

impl DriverProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = self.steering_gain > 0.0
            && self.target_speed > 0.0
            && self.compliance_noise >= 0.0
            && self.turn_radius > 0.0
            && (0.0..=1.0).contains(&self.miss_prob)
            && self.anticipation >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config("profile", format!("invalid driver profile {self:?}")))
        }
    }

    /// Draws a driver from the default population.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, speed_sensitive: bool) -> Self {
        Self {
            reaction_delay: rng.random_range(0..=3),
            steering_gain: rng.random_range(1.5..3.0),
            target_speed: rng.random_range(6.0..10.0),
            compliance_noise: rng.random_range(0.0..0.04),
            turn_radius: rng.random_range(4.0..6.0),
            miss_prob: rng.random_range(0.0..0.1),
            anticipation: rng.random_range(5.0..20.0),
            speed_sensitive,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SimState {
    pub pos: (f64, f64),
    pub z: f64,
    pub vel: (f64, f64),
    pub vz: f64,
    pub heading: f64,
    pub junction_indicator: f64,
    pub at_roundabout: f64,
    pub next_waypoint: (f64, f64),
    pub steer: f64,
    pub reverse: f64,
    pub brake: f64,
}

impl SimState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.pos.0,
            self.pos.1,
            self.z,
            self.vel.0,
            self.vel.1,
            self.vz,
            self.heading,
            self.junction_indicator,
            self.at_roundabout,
            self.next_waypoint.0,
            self.next_waypoint.1,
            self.steer,
            self.reverse,
            self.brake,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(Error::Dimension { context: "sim state", expected: STATE_DIM, got: v.len() });
        }
        Ok(Self {
            pos: (v[0], v[1]),
            z: v[2],
            vel: (v[3], v[4]),
            vz: v[5],
            heading: v[6],
            junction_indicator: v[7],
            at_roundabout: v[8],
            next_waypoint: (v[9], v[10]),
            steer: v[11],
            reverse: v[12],
            brake: v[13],
        })
    }

    pub fn speed(&self) -> f64 {
        (self.vel.0 * self.vel.0 + self.vel.1 * self.vel.1).sqrt()
    }

    /// Distance to the upcoming junction encoded by the indicator.
    pub fn junction_distance(&self) -> f64 {
        if self.junction_indicator > 0.0 {
            -self.junction_indicator.ln()
        } else {
            f64::INFINITY
        }
    }
}

/// `‖pos − goal‖²`.
pub fn tracking_cost(state: &SimState, prev_goal: (f64, f64)) -> f64 {
    (state.pos.0 - prev_goal.0).powi(2) + (state.pos.1 - prev_goal.1).powi(2)
}

/// Waypoint-lookahead heuristic used for exploration and adaptation data.
pub fn explore_policy(state: &SimState, upcoming: Option<Junction>, consts: &SimConstants) -> Instruction {
    let d = state.junction_distance();
    let base = match upcoming {
        Some(j) if d < consts.turn_distance => {
            if j.roundabout {
                BaseInstruction::EnterRoundabout
            } else if j.dir == TurnDir::Left {
                BaseInstruction::TurnLeft
            } else {
                BaseInstruction::TurnRight
            }
        }
        Some(j) if d < consts.prepare_distance => {
            if j.dir == TurnDir::Left {
                BaseInstruction::PrepareTurnLeft
            } else {
                BaseInstruction::PrepareTurnRight
            }
        }
        _ if state.at_roundabout > 0.5 => BaseInstruction::KeepLeft,
        _ => BaseInstruction::NoInstruction,
    };
    Instruction::normal(base)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Events {
    pub collision: bool,
    pub missed_turn: bool,
}

/// Human controls, sampled at tick boundaries.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Controls {
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
    pub reverse: bool,
}

#[derive(Clone, Debug, Default)]
struct DriverMemory {
    /// Turn intention and the time it becomes effective.
    intent: Option<(TurnDir, f64)>,
    prepared: Option<TurnDir>,
    speed_mod: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: SimState,
    pub events: Events,
    pub cost: f64,
    pub done: bool,
}

/// One episode: a route, a driver, and the hidden driver state.
#[derive(Clone, Debug)]
pub struct Env {
    pub route: Route,
    pub profile: DriverProfile,
    pub consts: SimConstants,
    state: SimState,
    speed: f64,
    leg: usize,
    memory: DriverMemory,
    rng: ChaCha8Rng,
    t: usize,
    progress: f64,
    seg_hint: usize,
    goal: (f64, f64),
    off_lane: bool,
    missed: Vec<bool>,
    max_steps: usize,
}

impl Env {
    pub fn new(route: Route, profile: DriverProfile, consts: SimConstants, rng: ChaCha8Rng) -> Result<Self> {
        profile.validate()?;
        let speed = profile.target_speed;
        let max_steps = (2.0 * route.length() / profile.target_speed).ceil() as usize + 10;
        let n_junctions = route.junctions.len();
        let mut env = Self {
            route,
            profile,
            consts,
            state: SimState::default(),
            speed,
            leg: 0,
            memory: DriverMemory { speed_mod: 1.0, ..Default::default() },
            rng,
            t: 0,
            progress: 0.0,
            seg_hint: 0,
            goal: (0.0, 0.0),
            off_lane: false,
            missed: vec![false; n_junctions],
            max_steps,
        };
        env.state.vel = (speed, 0.0);
        env.refresh_observation();
        env.goal = env.route.point_at(env.progress + env.speed * env.consts.dt);
        Ok(env)
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    /// Goal chosen at the current step; the next step's cost is measured against it.
    pub fn goal(&self) -> (f64, f64) {
        self.goal
    }

    /// Route segment the vehicle was last projected onto.
    pub fn segment(&self) -> usize {
        self.seg_hint
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn done(&self) -> bool {
        self.progress >= self.route.length() - 1.0 || self.t >= self.max_steps
    }

    /// Junction the driver is heading for (the end of the current leg's run).
    pub fn upcoming_junction(&self) -> Option<Junction> {
        self.route.junction_from(self.leg + 1)
    }

    pub fn explore_action(&self) -> Instruction {
        explore_policy(&self.state, self.upcoming_junction(), &self.consts)
    }

    fn junction_index(&self, j: &Junction) -> usize {
        self.route.junctions.iter().position(|x| x.waypoint == j.waypoint).expect("junction belongs to route")
    }

    fn refresh_observation(&mut self) {
        let pos = self.state.pos;
        let d = match self.upcoming_junction() {
            Some(j) => dist(pos, self.route.waypoints[j.waypoint]),
            None => dist(pos, self.route.goal()),
        };
        self.state.junction_indicator = (-d.min(self.consts.max_distance)).exp();
        let near_roundabout = self
            .route
            .junctions
            .iter()
            .any(|j| j.roundabout && dist(pos, self.route.waypoints[j.waypoint]) <= self.consts.roundabout_radius);
        self.state.at_roundabout = if near_roundabout { 1.0 } else { 0.0 };
        let next_wp = (self.leg + 1).min(self.route.waypoints.len() - 1);
        self.state.next_waypoint = self.route.waypoints[next_wp];
    }

    fn hear(&mut self, instruction: Instruction) {
        let now = self.t as f64;
        if self.profile.speed_sensitive {
            self.memory.speed_mod = match instruction.speed {
                Speed::Normal => 1.0,
                Speed::Slower => self.consts.slower,
                Speed::Faster => self.consts.faster,
            };
        }
        let delay = self.profile.reaction_delay as f64;
        // A hurried voice shortens a speed-sensitive driver's reaction by a step.
        let urgency = if self.profile.speed_sensitive && instruction.speed == Speed::Faster { 1.0 } else { 0.0 };
        let turn = |dir: TurnDir, mem: &DriverMemory| {
            let bonus = if mem.prepared == Some(dir) { 1.0 } else { 0.0 };
            let at = now + (delay - bonus - urgency).max(0.0);
            match mem.intent {
                Some((d, t)) if d == dir && t <= at => Some((d, t)),
                _ => Some((dir, at)),
            }
        };
        match instruction.base {
            BaseInstruction::TurnLeft => self.memory.intent = turn(TurnDir::Left, &self.memory),
            BaseInstruction::TurnRight => self.memory.intent = turn(TurnDir::Right, &self.memory),
            BaseInstruction::PrepareTurnLeft => self.memory.prepared = Some(TurnDir::Left),
            BaseInstruction::PrepareTurnRight => self.memory.prepared = Some(TurnDir::Right),
            BaseInstruction::EnterRoundabout => {
                if let Some(j) = self.upcoming_junction().filter(|j| j.roundabout) {
                    self.memory.intent = turn(j.dir, &self.memory);
                }
            }
            BaseInstruction::KeepLeft | BaseInstruction::NoInstruction => {}
        }
    }

    /// Signed distance along the current leg past the upcoming junction.
    fn past_junction(&self, pos: (f64, f64), j: &Junction) -> f64 {
        let seg = j.waypoint - 1;
        let d = self.route.segment_dir(seg);
        let w = self.route.waypoints[j.waypoint];
        (pos.0 - w.0) * d.0 + (pos.1 - w.1) * d.1
    }

    /// Advances the leg through straight waypoints and committed turns.
    fn update_leg(&mut self, events: &mut Events) {
        let pos = self.state.pos;
        let now = self.t as f64;
        loop {
            if self.leg + 1 >= self.route.n_segments() {
                return;
            }
            let w = self.leg + 1;
            match self.route.junctions.iter().find(|j| j.waypoint == w).copied() {
                None => {
                    // straight intersection
                    let d = self.route.segment_dir(self.leg);
                    let p = self.route.waypoints[w];
                    if (pos.0 - p.0) * d.0 + (pos.1 - p.1) * d.1 >= 0.0 {
                        self.leg += 1;
                        continue;
                    }
                    return;
                }
                Some(j) => {
                    let past = self.past_junction(pos, &j);
                    let near = dist(pos, self.route.waypoints[j.waypoint]) <= self.profile.anticipation || past >= 0.0;
                    let ready = matches!(self.memory.intent, Some((d, at)) if d == j.dir && at <= now + 1e-9);
                    let idx = self.junction_index(&j);
                    if ready && near {
                        self.leg += 1;
                        self.memory.intent = None;
                        self.memory.prepared = None;
                        continue;
                    }
                    if past > self.consts.miss_distance && !self.missed[idx] {
                        self.missed[idx] = true;
                        events.missed_turn = true;
                    }
                    if past > self.consts.recover_distance {
                        self.leg += 1;
                        self.memory.intent = None;
                        self.memory.prepared = None;
                        continue;
                    }
                    return;
                }
            }
        }
    }

    /// Distance to the destination along the final leg (infinite before it).
    fn remaining_on_final_leg(&self) -> f64 {
        if self.leg + 1 < self.route.n_segments() {
            return f64::INFINITY;
        }
        let end = self.route.goal();
        let d = self.route.segment_dir(self.leg);
        (end.0 - self.state.pos.0) * d.0 + (end.1 - self.state.pos.1) * d.1
    }

    /// Pure-pursuit target on the current leg's line.
    fn pursuit_heading(&self) -> f64 {
        let pos = self.state.pos;
        let a = self.route.waypoints[self.leg];
        let d = self.route.segment_dir(self.leg);
        let u = (pos.0 - a.0) * d.0 + (pos.1 - a.1) * d.1;
        let look = u + self.consts.lookahead.max(0.5 * self.speed);
        let target = (a.0 + d.0 * look, a.1 + d.1 * look);
        (target.1 - pos.1).atan2(target.0 - pos.0)
    }

    /// Steps the synthetic driver under `instruction`.
    pub fn step(&mut self, instruction: Instruction) -> StepOutcome {
        let dropped = self.rng.random::<f64>() < self.profile.miss_prob;
        let noise = if self.profile.compliance_noise > 0.0 {
            Normal::new(0.0, self.profile.compliance_noise).expect("finite std").sample(&mut self.rng)
        } else {
            0.0
        };
        if !dropped {
            self.hear(instruction);
        }
        self.state.heading = wrap_angle(self.state.heading + noise);
        let mut events = Events::default();
        let h = self.consts.dt / self.consts.substeps as f64;
        let mut steer_sum = 0.0;
        let mut brake_sum = 0.0;
        for _ in 0..self.consts.substeps {
            self.update_leg(&mut events);
            let err = wrap_angle(self.pursuit_heading() - self.state.heading);
            let cruise = self.profile.target_speed * self.memory.speed_mod;
            let target = if err.abs() > 0.3 { cruise.min(self.consts.corner_speed) } else { cruise };
            let dv = (target - self.speed).clamp(-self.consts.decel * h, self.consts.accel * h);
            self.speed = (self.speed + dv).max(0.0);
            let max_rate = self.speed / self.profile.turn_radius;
            let rate = (self.profile.steering_gain * err).clamp(-max_rate, max_rate);
            self.state.heading = wrap_angle(self.state.heading + rate * h);
            let mut travel = self.speed * h;
            let remaining = self.remaining_on_final_leg();
            let arrived = travel >= remaining;
            if arrived {
                travel = remaining.max(0.0);
            }
            self.state.pos.0 += travel * self.state.heading.cos();
            self.state.pos.1 += travel * self.state.heading.sin();
            if arrived {
                self.speed = 0.0;
            }
            steer_sum += if max_rate > 0.0 { rate / max_rate } else { 0.0 };
            brake_sum += if dv < 0.0 { -dv / (self.consts.decel * h) } else { 0.0 };
        }
        let n = self.consts.substeps as f64;
        self.state.steer = steer_sum / n;
        self.state.brake = brake_sum / n;
        self.state.reverse = 0.0;
        self.finish_step(events)
    }

    /// Steps with a human at the wheel; the instruction only informs them.
    pub fn step_manual(&mut self, controls: Controls) -> StepOutcome {
        let c = Controls {
            steer: if controls.steer.is_finite() { controls.steer.clamp(-1.0, 1.0) } else { 0.0 },
            throttle: if controls.throttle.is_finite() { controls.throttle.clamp(0.0, 1.0) } else { 0.0 },
            brake: if controls.brake.is_finite() { controls.brake.clamp(0.0, 1.0) } else { 0.0 },
            reverse: controls.reverse,
        };
        let mut events = Events::default();
        let h = self.consts.dt / self.consts.substeps as f64;
        let sign = if c.reverse { -1.0 } else { 1.0 };
        for _ in 0..self.consts.substeps {
            let dv = c.throttle * self.consts.accel * h - c.brake * self.consts.decel * h;
            self.speed = (self.speed + dv).clamp(0.0, 3.0 * self.profile.target_speed);
            let rate = c.steer * self.speed / self.consts.manual_turn_radius;
            self.state.heading = wrap_angle(self.state.heading + sign * rate * h);
            self.state.pos.0 += sign * self.speed * self.state.heading.cos() * h;
            self.state.pos.1 += sign * self.speed * self.state.heading.sin() * h;
            self.manual_leg(&mut events);
        }
        self.state.steer = c.steer;
        self.state.brake = c.brake;
        self.state.reverse = if c.reverse { 1.0 } else { 0.0 };
        self.finish_step(events)
    }

    /// A human has no intent memory: legs follow the position alone.
    fn manual_leg(&mut self, events: &mut Events) {
        while self.leg + 1 < self.route.n_segments() {
            let (_, _, seg) = self.route.project(self.state.pos, self.seg_hint.max(self.leg));
            if seg <= self.leg {
                if let Some(j) = self.route.junctions.iter().find(|j| j.waypoint == self.leg + 1).copied() {
                    let idx = self.junction_index(&j);
                    if self.past_junction(self.state.pos, &j) > self.consts.miss_distance && !self.missed[idx] {
                        self.missed[idx] = true;
                        events.missed_turn = true;
                    }
                }
                return;
            }
            self.leg += 1;
        }
    }

    fn finish_step(&mut self, mut events: Events) -> StepOutcome {
        let sign = if self.state.reverse > 0.5 { -1.0 } else { 1.0 };
        self.state.vel = (sign * self.speed * self.state.heading.cos(), sign * self.speed * self.state.heading.sin());
        let (s, lateral, seg) = self.route.project(self.state.pos, self.seg_hint);
        self.seg_hint = seg;
        self.progress = self.progress.max(s);
        let off = lateral > self.consts.lane_half_width;
        events.collision = off && !self.off_lane;
        self.off_lane = off;
        self.refresh_observation();
        let cost = tracking_cost(&self.state, self.goal);
        self.t += 1;
        self.goal = self.route.point_at(self.progress + self.speed * self.consts.dt);
        StepOutcome { state: self.state, events, cost, done: self.done() }
    }
}

/// Dynamics-model architecture for the 14-field driving state: positions and
/// velocity in the vehicle frame, the junction indicator as a distance.
pub fn model_arch(speed_actions: bool, history: usize, hidden: Vec<usize>) -> ArchSpec {
    let actions = if speed_actions {
        ActionCoding::Factored { base: N_BASE, speeds: N_SPEEDS }
    } else {
        ActionCoding::OneHot(N_BASE)
    };
    let mut scale = vec![1.0; STATE_DIM];
    for (f, s) in [(field::X, 10.0), (field::Y, 10.0), (field::VX, 5.0), (field::VY, 5.0), (field::INDICATOR, 20.0), (field::WP_X, 40.0), (field::WP_Y, 40.0)] {
        scale[f] = s;
    }
    ArchSpec::new(STATE_DIM, actions, history, hidden)
        .with_frame(PlanarFrame {
            heading: field::HEADING,
            points: vec![(field::X, field::Y), (field::WP_X, field::WP_Y)],
            vectors: vec![(field::VX, field::VY)],
        })
        .with_scale(scale)
        .with_neglog(vec![field::INDICATOR], 50.0)
}

/// One logged step of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: usize,
    pub state: SimState,
    pub action: Instruction,
    pub cost: f64,
    pub events: Events,
}

pub fn write_trajectory_csv<W: Write>(w: W, rows: &[LogRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend(FIELD_NAMES.iter().map(|s| s.to_string()));
    header.extend(["action_id", "speed_id", "cost", "collision", "missed_turn"].map(String::from));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.state.to_vec().iter().map(|x| format!("{x:?}")));
        rec.push((r.action.base as usize).to_string());
        rec.push((r.action.speed as usize).to_string());
        rec.push(format!("{:?}", r.cost));
        rec.push((r.events.collision as u8).to_string());
        rec.push((r.events.missed_turn as u8).to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
