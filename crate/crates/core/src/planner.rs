//! Model-predictive control over discrete instruction sequences, and the
//! exact backward-induction planner for tabular MDPs.

use crate::drivesim::{explore_policy, field, BaseInstruction, Env, Instruction, Junction, Route, SimState, TurnDir, N_BASE};
use crate::dynmodel::{HistoryWindow, ModelParams, Simulator};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tabular::{TabularMdp, TabularPolicy};

#[derive(Clone, Debug, PartialEq)]
pub struct PlanConfig {
    pub horizon: usize,
    /// Reward per step on which the sequence agrees with the explore policy.
    pub residual_bonus: f64,
    /// Cost per turn instruction issued away from a junction.
    pub turn_penalty: f64,
    /// Candidate instruction ids.
    pub action_set: Vec<usize>,
    /// Keep only the best `beam` prefixes per depth. `None` searches exhaustively.
    pub beam: Option<usize>,
    /// MPC goals: re-anchored on each predicted state's route progress
    /// (`true`) or laid out once at the current speed (`false`).
    pub anchored_goals: bool,
    /// Drop instructions that contradict the route ahead (see [`route_actions`]).
    pub route_mask: bool,
}

impl PlanConfig {
    pub fn new(horizon: usize, n_actions: usize) -> Self {
        Self {
            horizon,
            residual_bonus: 1.0,
            turn_penalty: 5.0,
            action_set: (0..n_actions).collect(),
            beam: None,
            anchored_goals: true,
            route_mask: false,
        }
    }

    /// This config with the action set narrowed for the current step.
    fn for_step(&self, env: &Env) -> PlanConfig {
        let mut cfg = self.clone();
        if self.route_mask {
            let allowed = route_actions(env, &self.action_set);
            if !allowed.is_empty() {
                cfg.action_set = allowed;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("plan.horizon", "must be at least 1"));
        }
        if self.action_set.is_empty() {
            return Err(Error::Empty("action set"));
        }
        if self.residual_bonus < 0.0 || self.turn_penalty < 0.0 {
            return Err(Error::config("plan", "shaping weights must be nonnegative"));
        }
        if self.beam == Some(0) {
            return Err(Error::config("plan.beam", "must be at least 1"));
        }
        Ok(())
    }
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self::new(5, N_BASE)
    }
}

/// A forkable one-step predictor of the world state.
pub trait Predictor: Clone {
    /// State in which the next action will be taken.
    fn current(&self) -> &[f64];
    fn advance(&mut self, action: usize) -> Result<()>;
}

/// A learned model rolled out from a history window.
#[derive(Clone)]
pub struct ModelPredictor<'a> {
    sim: Simulator<'a, f64>,
    state: Vec<f64>,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(params: &'a ModelParams<f64>, history: &HistoryWindow<f64>) -> Result<Self> {
        let sim = Simulator::new(params, history)?;
        Ok(Self { sim, state: history.last_state().to_vec() })
    }
}

impl Predictor for ModelPredictor<'_> {
    fn current(&self) -> &[f64] {
        &self.state
    }

    fn advance(&mut self, action: usize) -> Result<()> {
        self.state = self.sim.step(action)?;
        Ok(())
    }
}

/// The simulator itself as a model: a perfect predictor for deterministic drivers.
#[derive(Clone)]
pub struct EnvPredictor {
    env: Env,
    state: Vec<f64>,
}

impl EnvPredictor {
    pub fn new(env: &Env) -> Self {
        Self { env: env.clone(), state: env.state().to_vec() }
    }
}

impl Predictor for EnvPredictor {
    fn current(&self) -> &[f64] {
        &self.state
    }

    fn advance(&mut self, action: usize) -> Result<()> {
        let ins = Instruction::from_id(action).ok_or_else(|| Error::Shape(format!("instruction id {action}")))?;
        self.state = self.env.step(ins).state.to_vec();
        Ok(())
    }
}

/// Where the goal for lookahead step `h` comes from.
#[derive(Clone, Copy, Debug)]
pub enum Goals<'a> {
    /// One goal per step, fixed in advance.
    Fixed(&'a [(f64, f64)]),
    /// The first goal is given; later ones are selected from the predicted
    /// state the way the simulator selects them from the real one.
    Anchored(RouteGoals<'a>),
}

#[derive(Clone, Copy, Debug)]
pub struct RouteGoals<'a> {
    pub route: &'a Route,
    pub first: (f64, f64),
    pub progress: f64,
    pub segment: usize,
    pub dt: f64,
}

impl RouteGoals<'_> {
    fn select(&self, state: &[f64]) -> (f64, f64) {
        let (s, _, _) = self.route.project((state[field::X], state[field::Y]), self.segment);
        let v = state[field::VX].hypot(state[field::VY]);
        self.route.point_at(s.max(self.progress) + v * self.dt)
    }
}

impl Goals<'_> {
    fn at(&self, h: usize, before: &[f64]) -> (f64, f64) {
        match self {
            Goals::Fixed(g) => g[h],
            Goals::Anchored(r) if h == 0 => r.first,
            Goals::Anchored(r) => r.select(before),
        }
    }
}

fn is_turn(action: usize) -> bool {
    Instruction::from_id(action).is_some_and(|i| i.base.is_turn())
}

/// Shaped cost of taking `action` from `before`, landing in `after`, at lookahead step `h`.
fn step_cost(before: &[f64], after: &[f64], action: usize, h: usize, goals: &Goals, explore_seq: &[usize], cfg: &PlanConfig) -> f64 {
    let (gx, gy) = goals.at(h, before);
    let mut c = (after[field::X] - gx).powi(2) + (after[field::Y] - gy).powi(2);
    if action == explore_seq[h] {
        c -= cfg.residual_bonus;
    }
    if is_turn(action) && before[field::INDICATOR] < (-10.0f64).exp() {
        c += cfg.turn_penalty;
    }
    c
}

fn check_lengths(n: usize, goals: &Goals, explore_seq: &[usize], cfg: &PlanConfig) -> Result<()> {
    cfg.validate()?;
    let n_goals = match goals {
        Goals::Fixed(g) => g.len(),
        Goals::Anchored(_) => cfg.horizon,
    };
    for (what, len) in [("action sequence", n), ("goals", n_goals), ("explore sequence", explore_seq.len())] {
        if len != cfg.horizon {
            return Err(Error::Dimension { context: what, expected: cfg.horizon, got: len });
        }
    }
    Ok(())
}

/// Plan cost of `actions` under any predictor.
pub fn plan_cost_with<P: Predictor>(start: &P, actions: &[usize], goals: &Goals, explore_seq: &[usize], cfg: &PlanConfig) -> Result<f64> {
    check_lengths(actions.len(), goals, explore_seq, cfg)?;
    let mut p = start.clone();
    let mut total = 0.0;
    for (h, &a) in actions.iter().enumerate() {
        let before = p.current().to_vec();
        p.advance(a)?;
        total += step_cost(&before, p.current(), a, h, goals, explore_seq, cfg);
    }
    Ok(total)
}

/// Goal tracking cost of an instruction sequence under the learned model, with
/// residual and turn shaping.
pub fn plan_cost(
    actions: &[usize],
    params: &ModelParams<f64>,
    history: &HistoryWindow<f64>,
    goals: &[(f64, f64)],
    explore_seq: &[usize],
    cfg: &PlanConfig,
) -> Result<f64> {
    plan_cost_with(&ModelPredictor::new(params, history)?, actions, &Goals::Fixed(goals), explore_seq, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub sequence: Vec<usize>,
    pub cost: f64,
}

impl SearchResult {
    pub fn first(&self) -> usize {
        self.sequence[0]
    }
}

/// Argmin over all sequences of `cfg.action_set` of length `cfg.horizon`,
/// sharing rollout prefixes. Ties go to the lexicographically smallest id
/// sequence.
pub fn tree_search_with<P: Predictor>(start: &P, goals: &Goals, explore_seq: &[usize], cfg: &PlanConfig) -> Result<SearchResult> {
    check_lengths(cfg.horizon, goals, explore_seq, cfg)?;
    let mut actions = cfg.action_set.clone();
    actions.sort_unstable();
    actions.dedup();
    match cfg.beam {
        None => {
            let mut best = SearchResult { sequence: Vec::new(), cost: f64::INFINITY };
            let mut prefix = Vec::with_capacity(cfg.horizon);
            descend(start, 0.0, &mut prefix, &actions, goals, explore_seq, cfg, &mut best)?;
            if best.sequence.is_empty() {
                return Err(Error::Shape("no finite-cost sequence".into()));
            }
            Ok(best)
        }
        Some(width) => beam_search(start, width, &actions, goals, explore_seq, cfg),
    }
}

#[allow(clippy::too_many_arguments)]
fn descend<P: Predictor>(
    node: &P,
    acc: f64,
    prefix: &mut Vec<usize>,
    actions: &[usize],
    goals: &Goals,
    explore_seq: &[usize],
    cfg: &PlanConfig,
    best: &mut SearchResult,
) -> Result<()> {
    let h = prefix.len();
    for &a in actions {
        let mut child = node.clone();
        child.advance(a)?;
        let total = acc + step_cost(node.current(), child.current(), a, h, goals, explore_seq, cfg);
        prefix.push(a);
        if h + 1 == cfg.horizon {
            // strict comparison keeps the earliest (smallest) sequence on ties
            if total < best.cost {
                *best = SearchResult { sequence: prefix.clone(), cost: total };
            }
        } else {
            descend(&child, total, prefix, actions, goals, explore_seq, cfg, best)?;
        }
        prefix.pop();
    }
    Ok(())
}

fn beam_search<P: Predictor>(
    start: &P,
    width: usize,
    actions: &[usize],
    goals: &Goals,
    explore_seq: &[usize],
    cfg: &PlanConfig,
) -> Result<SearchResult> {
    let mut frontier = vec![(Vec::new(), 0.0, start.clone())];
    for h in 0..cfg.horizon {
        let mut next = Vec::with_capacity(frontier.len() * actions.len());
        for (seq, acc, node) in &frontier {
            for &a in actions {
                let mut child = node.clone();
                child.advance(a)?;
                let total = acc + step_cost(node.current(), child.current(), a, h, goals, explore_seq, cfg);
                let mut s = seq.clone();
                s.push(a);
                next.push((s, total, child));
            }
        }
        next.sort_by(|x, y| x.1.total_cmp(&y.1).then_with(|| x.0.cmp(&y.0)));
        next.truncate(width);
        frontier = next;
    }
    let (sequence, cost, _) = frontier.swap_remove(0);
    Ok(SearchResult { sequence, cost })
}

/// First instruction of the cheapest sequence under the learned model.
pub fn tree_search(
    params: &ModelParams<f64>,
    history: &HistoryWindow<f64>,
    goals: &[(f64, f64)],
    explore_seq: &[usize],
    cfg: &PlanConfig,
) -> Result<usize> {
    Ok(tree_search_with(&ModelPredictor::new(params, history)?, &Goals::Fixed(goals), explore_seq, cfg)?.first())
}

/// Flat enumeration of every sequence through an arbitrary cost; the oracle
/// the prefix-sharing search is checked against.
pub fn exhaustive_argmin(action_set: &[usize], horizon: usize, mut cost: impl FnMut(&[usize]) -> Result<f64>) -> Result<SearchResult> {
    let mut actions = action_set.to_vec();
    actions.sort_unstable();
    actions.dedup();
    if actions.is_empty() || horizon == 0 {
        return Err(Error::Empty("sequence space"));
    }
    let mut idx = vec![0usize; horizon];
    let mut best = SearchResult { sequence: Vec::new(), cost: f64::INFINITY };
    loop {
        let seq: Vec<usize> = idx.iter().map(|&i| actions[i]).collect();
        let c = cost(&seq)?;
        if c < best.cost {
            best = SearchResult { sequence: seq, cost: c };
        }
        let mut pos = horizon;
        loop {
            if pos == 0 {
                return Ok(best);
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < actions.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Goal positions and explore instructions along the route for the next
/// `horizon` steps, assuming the vehicle keeps its current speed on the route.
pub fn lookahead(env: &Env, horizon: usize) -> (Vec<(f64, f64)>, Vec<usize>) {
    let route = &env.route;
    let c = &env.consts;
    let v = env.state().speed().max(0.5);
    let goals = (0..horizon).map(|h| route.point_at(env.progress() + (h + 1) as f64 * v * c.dt)).collect();
    let mut explore = vec![env.explore_action().id()];
    for h in 1..horizon {
        let s = env.progress() + h as f64 * v * c.dt;
        let pos = route.point_at(s);
        let upcoming: Option<(Junction, f64)> = route.junction_ahead(s);
        let d = upcoming.map_or_else(|| dist(pos, route.goal()), |(_, d)| d);
        let near_roundabout =
            route.junctions.iter().any(|j| j.roundabout && dist(pos, route.waypoints[j.waypoint]) <= c.roundabout_radius);
        let probe = SimState {
            junction_indicator: (-d.min(c.max_distance)).exp(),
            at_roundabout: if near_roundabout { 1.0 } else { 0.0 },
            ..*env.state()
        };
        explore.push(explore_policy(&probe, upcoming.map(|u| u.0), c).id());
    }
    (goals, explore)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn mpc_goals<'a>(env: &'a Env, fixed: &'a [(f64, f64)], cfg: &PlanConfig) -> Goals<'a> {
    if cfg.anchored_goals {
        Goals::Anchored(RouteGoals {
            route: &env.route,
            first: env.goal(),
            progress: env.progress(),
            segment: env.segment(),
            dt: env.consts.dt,
        })
    } else {
        Goals::Fixed(fixed)
    }
}

/// Receding-horizon controller around a fixed model.
#[derive(Clone, Debug)]
pub struct MpcPolicy {
    pub params: ModelParams<f64>,
    pub cfg: PlanConfig,
}

impl MpcPolicy {
    pub fn new(params: ModelParams<f64>, cfg: PlanConfig) -> Result<Self> {
        cfg.validate()?;
        if let Some(&bad) = cfg.action_set.iter().find(|&&a| a >= params.arch.n_actions()) {
            return Err(Error::Shape(format!("action {bad} outside the model's {} actions", params.arch.n_actions())));
        }
        Ok(Self { params, cfg })
    }

    pub fn act(&self, env: &Env, history: &HistoryWindow<f64>) -> Result<Instruction> {
        let cfg = self.cfg.for_step(env);
        let (fixed, explore) = lookahead(env, cfg.horizon);
        let goals = mpc_goals(env, &fixed, &cfg);
        let id = tree_search_with(&ModelPredictor::new(&self.params, history)?, &goals, &explore, &cfg)?.first();
        Instruction::from_id(id).ok_or_else(|| Error::Shape(format!("instruction id {id}")))
    }
}

/// MPC with the simulator standing in for the model.
pub fn oracle_mpc_action(env: &Env, cfg: &PlanConfig) -> Result<Instruction> {
    let cfg = cfg.for_step(env);
    let (fixed, explore) = lookahead(env, cfg.horizon);
    let goals = mpc_goals(env, &fixed, &cfg);
    let id = tree_search_with(&EnvPredictor::new(env), &goals, &explore, &cfg)?.first();
    Instruction::from_id(id).ok_or_else(|| Error::Shape(format!("instruction id {id}")))
}

/// Ids in `action_set` a navigator could sensibly say now: turn and prepare
/// instructions only towards the upcoming junction, roundabout entry only
/// before a roundabout, keep-left only inside one. Speed variants follow
/// their base instruction.
pub fn route_actions(env: &Env, action_set: &[usize]) -> Vec<usize> {
    let upcoming = env.upcoming_junction();
    let inside = env.state().at_roundabout > 0.5;
    action_set
        .iter()
        .copied()
        .filter(|&id| {
            let Some(instruction) = Instruction::from_id(id) else { return false };
            match instruction.base {
                BaseInstruction::NoInstruction => true,
                BaseInstruction::TurnLeft | BaseInstruction::PrepareTurnLeft => {
                    upcoming.is_some_and(|j| j.dir == TurnDir::Left)
                }
                BaseInstruction::TurnRight | BaseInstruction::PrepareTurnRight => {
                    upcoming.is_some_and(|j| j.dir == TurnDir::Right)
                }
                BaseInstruction::EnterRoundabout => upcoming.is_some_and(|j| j.roundabout),
                BaseInstruction::KeepLeft => inside,
            }
        })
        .collect()
}

/// Optimal deterministic time-dependent policy by backward induction. Ties go
/// to the lowest action index.
pub fn exact_tabular_planner<S: Scalar>(mdp: &TabularMdp<S>) -> Result<TabularPolicy<S>> {
    let (ns, na, hz) = (mdp.n_states(), mdp.n_actions(), mdp.horizon());
    let mut next = vec![S::zero(); ns];
    let mut table = vec![0usize; hz * ns];
    for h in (0..hz).rev() {
        let mut cur = vec![S::zero(); ns];
        for s in 0..ns {
            let mut best = (S::infinity(), 0);
            for a in 0..na {
                let q = mdp.cost(s, a) + mdp.kernel().row(s, a).iter().zip(&next).map(|(p, v)| *p * *v).sum::<S>();
                if q < best.0 {
                    best = (q, a);
                }
            }
            cur[s] = best.0;
            table[h * ns + s] = best.1;
        }
        next = cur;
    }
    TabularPolicy::deterministic(hz, ns, na, &table)
}

/// Instruction id used to pad histories at episode start.
pub const PAD_ACTION: usize = BaseInstruction::NoInstruction as usize;
