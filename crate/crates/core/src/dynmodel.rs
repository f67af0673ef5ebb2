//! Feedforward dynamics model over a history of state-action pairs.
//!
//! The network predicts the next-state delta in the frame of the most recent
//! state. Gradients of the multistep loss are hand-rolled through the whole
//! autoregressive rollout; the second-order meta-gradient reuses the same code
//! on [`Dual`] numbers to get an exact Hessian-vector product.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{Dual, Scalar};

/// Smoothing constant of the residual norm `√(‖r‖² + ε²) − ε`.
pub const SMOOTH_EPS: f64 = 1e-8;

const CHECKPOINT_MAGIC: &[u8; 8] = b"OMMBRL01";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(S::zero()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn slope<S: Scalar>(self, y: S) -> S {
        match self {
            Activation::Tanh => S::one() - y * y,
            Activation::Relu => {
                if y > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

/// How action ids are fed to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionCoding {
    OneHot(usize),
    /// `id = base_id + base · speed_id`, encoded as two one-hot blocks.
    Factored { base: usize, speeds: usize },
}

impl ActionCoding {
    pub fn n_actions(&self) -> usize {
        match *self {
            ActionCoding::OneHot(n) => n,
            ActionCoding::Factored { base, speeds } => base * speeds,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            ActionCoding::OneHot(n) => n,
            ActionCoding::Factored { base, speeds } => base + speeds,
        }
    }

    fn write<S: Scalar>(&self, action: usize, out: &mut [S]) {
        out.iter_mut().for_each(|x| *x = S::zero());
        match *self {
            ActionCoding::OneHot(_) => out[action] = S::one(),
            ActionCoding::Factored { base, .. } => {
                out[action % base] = S::one();
                out[base + action / base] = S::one();
            }
        }
    }
}

/// Which state fields live in the plane and rotate with the vehicle.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarFrame {
    pub heading: usize,
    /// Positions; the first pair is the vehicle position used as origin.
    pub points: Vec<(usize, usize)>,
    /// Free vectors (velocities): rotated, not translated.
    pub vectors: Vec<(usize, usize)>,
}

impl PlanarFrame {
    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.points.iter().chain(&self.vectors).copied()
    }

    fn origin(&self) -> (usize, usize) {
        self.points[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub state_dim: usize,
    pub actions: ActionCoding,
    pub history: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub frame: Option<PlanarFrame>,
    /// Per-feature scale: inputs are divided by it, output deltas multiplied.
    pub scale: Vec<f64>,
    /// Features in `(0, 1]` modelled as `−ln x` (capped).
    pub neglog: Vec<usize>,
    pub neglog_cap: f64,
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

impl ArchSpec {
    pub fn new(state_dim: usize, actions: ActionCoding, history: usize, hidden: Vec<usize>) -> Self {
        Self {
            state_dim,
            actions,
            history,
            hidden,
            activation: Activation::Tanh,
            frame: None,
            scale: vec![1.0; state_dim],
            neglog: Vec::new(),
            neglog_cap: 50.0,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_frame(mut self, frame: PlanarFrame) -> Self {
        self.frame = Some(frame);
        self
    }

    pub fn with_scale(mut self, scale: Vec<f64>) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_neglog(mut self, features: Vec<usize>, cap: f64) -> Self {
        self.neglog = features;
        self.neglog_cap = cap;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.history * (self.state_dim + self.actions.dim())
    }

    pub fn output_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_actions(&self) -> usize {
        self.actions.n_actions()
    }

    fn layers(&self) -> Vec<Layer> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden);
        widths.push(self.output_dim());
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let layer = Layer { fan_in: w[0], fan_out: w[1], w: offset, b: offset + w[0] * w[1] };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers().iter().map(|l| l.fan_in * l.fan_out + l.fan_out).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Arch(msg));
        if self.state_dim == 0 || self.history == 0 || self.actions.n_actions() == 0 {
            return bad("state_dim, history and action count must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            return bad(format!("hidden widths {:?} contain a zero", self.hidden));
        }
        if self.scale.len() != self.state_dim {
            return bad(format!("{} scales for {} features", self.scale.len(), self.state_dim));
        }
        if self.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("scales must be positive and finite".into());
        }
        let mut used = vec![false; self.state_dim];
        let mut claim = |i: usize| -> Result<()> {
            if i >= self.state_dim || std::mem::replace(&mut used[i], true) {
                return Err(Error::Arch(format!("feature {i} out of range or claimed twice")));
            }
            Ok(())
        };
        if let Some(frame) = &self.frame {
            if frame.points.is_empty() {
                return bad("planar frame needs an origin point".into());
            }
            claim(frame.heading)?;
            for (a, b) in frame.pairs() {
                claim(a)?;
                claim(b)?;
            }
        }
        for &i in &self.neglog {
            claim(i)?;
        }
        if !(self.neglog_cap > 0.0) {
            return bad("neglog cap must be positive".into());
        }
        Ok(())
    }

    fn to_model<S: Scalar>(&self, state: &[S]) -> Vec<S> {
        let mut out = state.to_vec();
        let cap = S::of(self.neglog_cap);
        for &i in &self.neglog {
            let x = out[i];
            out[i] = if x > S::zero() { (-x.ln()).min(cap) } else { cap };
        }
        out
    }

    fn from_model<S: Scalar>(&self, mut state: Vec<S>) -> Vec<S> {
        for &i in &self.neglog {
            state[i] = (-state[i]).exp();
        }
        state
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let pairs = |v: &[(usize, usize)]| v.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(" ");
        let mut lines = vec![
            format!("state_dim = {}", self.state_dim),
            match self.actions {
                ActionCoding::OneHot(n) => format!("actions = onehot:{n}"),
                ActionCoding::Factored { base, speeds } => format!("actions = factored:{base}x{speeds}"),
            },
            format!("history = {}", self.history),
            format!("hidden = {}", list(&self.hidden)),
            format!("activation = {}", self.activation.name()),
            format!("scale = {}", self.scale.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" ")),
            format!("neglog = {}", list(&self.neglog)),
            format!("neglog_cap = {:?}", self.neglog_cap),
        ];
        match &self.frame {
            None => lines.push("frame = none".into()),
            Some(f) => {
                lines.push("frame = planar".into());
                lines.push(format!("frame.heading = {}", f.heading));
                lines.push(format!("frame.points = {}", pairs(&f.points)));
                lines.push(format!("frame.vectors = {}", pairs(&f.vectors)));
            }
        }
        lines.join("\n") + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut arch = ArchSpec::new(0, ActionCoding::OneHot(0), 0, Vec::new());
        arch.scale.clear();
        let mut planar = false;
        let mut frame = PlanarFrame { heading: 0, points: Vec::new(), vectors: Vec::new() };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line.split_once('=').ok_or_else(|| Error::config(line, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let err = |e: &dyn std::fmt::Display| Error::config(key, e.to_string());
            let count = |s: &str| s.trim().parse::<usize>().map_err(|e| err(&e));
            let list = |s: &str| -> Result<Vec<usize>> {
                s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(count).collect()
            };
            let pairs = |s: &str| -> Result<Vec<(usize, usize)>> {
                s.split_whitespace()
                    .map(|t| {
                        let (a, b) = t.split_once(':').ok_or_else(|| err(&"expected `a:b`"))?;
                        Ok((count(a)?, count(b)?))
                    })
                    .collect()
            };
            match key {
                "state_dim" => arch.state_dim = count(value)?,
                "actions" => {
                    arch.actions = if let Some(n) = value.strip_prefix("onehot:") {
                        ActionCoding::OneHot(count(n)?)
                    } else if let Some(f) = value.strip_prefix("factored:") {
                        let (b, s) = f.split_once('x').ok_or_else(|| err(&"expected `factored:BxS`"))?;
                        ActionCoding::Factored { base: count(b)?, speeds: count(s)? }
                    } else {
                        return Err(err(&format!("unknown action coding `{value}`")));
                    }
                }
                "history" => arch.history = count(value)?,
                "hidden" => arch.hidden = list(value)?,
                "activation" => {
                    arch.activation = match value {
                        "tanh" => Activation::Tanh,
                        "relu" => Activation::Relu,
                        other => return Err(err(&format!("unknown activation `{other}`"))),
                    }
                }
                "scale" => {
                    arch.scale = value
                        .split_whitespace()
                        .map(|t| t.parse::<f64>().map_err(|e| err(&e)))
                        .collect::<Result<_>>()?
                }
                "neglog" => arch.neglog = list(value)?,
                "neglog_cap" => arch.neglog_cap = value.parse().map_err(|e| err(&e))?,
                "frame" => planar = value == "planar",
                "frame.heading" => frame.heading = count(value)?,
                "frame.points" => frame.points = pairs(value)?,
                "frame.vectors" => frame.vectors = pairs(value)?,
                other => return Err(Error::config(other, "unknown key")),
            }
        }
        if planar {
            arch.frame = Some(frame);
        }
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub arch: ArchSpec,
    pub theta: Vec<S>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn new(arch: ArchSpec, theta: Vec<S>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.n_params() {
            return Err(Error::Dimension { context: "theta", expected: arch.n_params(), got: theta.len() });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Arch("theta has non-finite entries".into()));
        }
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        let n = arch.n_params();
        Self::new(arch, vec![S::zero(); n])
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![S::zero(); arch.n_params()];
        for layer in arch.layers() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut theta[layer.w..layer.b] {
                *w = S::of(rng.random_range(-limit..limit));
            }
        }
        Ok(Self { arch, theta })
    }

    fn with_theta(&self, theta: Vec<S>) -> Self {
        Self { arch: self.arch.clone(), theta }
    }
}

/// The last `K` state-action pairs, oldest first. The action of the newest
/// pair is a placeholder: the action being evaluated replaces it.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryWindow<S> {
    pub pairs: Vec<(Vec<S>, usize)>,
}

impl<S: Scalar> HistoryWindow<S> {
    pub fn new(pairs: Vec<(Vec<S>, usize)>) -> Self {
        Self { pairs }
    }

    /// Episode start: the first state repeated with action `pad_action`.
    pub fn padded(state: &[S], k: usize, pad_action: usize) -> Self {
        Self { pairs: vec![(state.to_vec(), pad_action); k] }
    }

    /// Window ending at transition `i` of `steps`; missing history before the
    /// first state is padded with the first state and `pad_action`.
    pub fn at(steps: &[Transition<S>], i: usize, k: usize, pad_action: usize) -> Self {
        let pairs = (0..k)
            .map(|back| {
                let idx = i as isize - (k - 1 - back) as isize;
                if idx < 0 {
                    (steps[0].state.clone(), pad_action)
                } else {
                    (steps[idx as usize].state.clone(), steps[idx as usize].action)
                }
            })
            .collect();
        Self { pairs }
    }

    /// Appends the outcome of `action` and drops the oldest pair.
    pub fn push(&mut self, action: usize, next_state: Vec<S>) {
        if let Some(last) = self.pairs.last_mut() {
            last.1 = action;
        }
        self.pairs.remove(0);
        self.pairs.push((next_state, action));
    }

    pub fn last_state(&self) -> &[S] {
        &self.pairs[self.pairs.len() - 1].0
    }

    fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> HistoryWindow<T> {
        HistoryWindow { pairs: self.pairs.iter().map(|(s, a)| (s.iter().map(|x| f(*x)).collect(), *a)).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition<S> {
    pub state: Vec<S>,
    pub action: usize,
    pub next_state: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem<S> {
    pub history: HistoryWindow<S>,
    pub actions: Vec<usize>,
    /// `s_i, …, s_{i+L}`; the first equals the newest history state.
    pub targets: Vec<Vec<S>>,
}

impl<S: Scalar> BatchItem<S> {
    fn map<T: Scalar>(&self, f: impl Fn(S) -> T + Copy) -> BatchItem<T> {
        BatchItem {
            history: self.history.map(f),
            actions: self.actions.clone(),
            targets: self.targets.iter().map(|s| s.iter().map(|x| f(*x)).collect()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub items: Vec<BatchItem<S>>,
    pub rollout_len: usize,
}

impl<S: Scalar> Batch<S> {
    pub fn new(items: Vec<BatchItem<S>>, rollout_len: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("batch"));
        }
        for item in &items {
            if item.actions.len() != rollout_len {
                return Err(Error::Dimension { context: "batch actions", expected: rollout_len, got: item.actions.len() });
            }
            if item.targets.len() != rollout_len + 1 {
                return Err(Error::Dimension {
                    context: "batch targets",
                    expected: rollout_len + 1,
                    got: item.targets.len(),
                });
            }
        }
        Ok(Self { items, rollout_len })
    }

    /// Every length-`L` window of a chained trajectory. With `pad` the windows
    /// start at the first transition and the missing history is padded;
    /// otherwise a full history of `K` real pairs is required, so at least
    /// `K + L − 1` transitions.
    pub fn from_transitions(steps: &[Transition<S>], k: usize, rollout_len: usize, pad: Option<usize>) -> Result<Self> {
        let n = steps.len();
        let first = if pad.is_some() { 0 } else { k.saturating_sub(1) };
        let required = first + rollout_len;
        if rollout_len == 0 || n < required {
            return Err(Error::TrajectoryTooShort { got: n, required: required.max(1) });
        }
        let items = (first..=n - rollout_len)
            .map(|i| {
                let mut targets: Vec<Vec<S>> = steps[i..i + rollout_len].iter().map(|t| t.state.clone()).collect();
                targets.push(steps[i + rollout_len - 1].next_state.clone());
                BatchItem {
                    history: HistoryWindow::at(steps, i, k, pad.unwrap_or(0)),
                    actions: steps[i..i + rollout_len].iter().map(|t| t.action).collect(),
                    targets,
                }
            })
            .collect();
        Self::new(items, rollout_len)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn map<T: Scalar>(&self, f: impl Fn(S) -> T + Copy) -> Batch<T> {
        Batch { items: self.items.iter().map(|i| i.map(f)).collect(), rollout_len: self.rollout_len }
    }
}

fn wrap_angle<S: Scalar>(x: S) -> S {
    let two_pi = S::of(2.0 * PI);
    x - two_pi * ((x - S::of(PI)) / two_pi).ceil()
}

fn check_state<S>(arch: &ArchSpec, state: &[S]) -> Result<()> {
    if state.len() != arch.state_dim {
        return Err(Error::Dimension { context: "state", expected: arch.state_dim, got: state.len() });
    }
    Ok(())
}

fn check_action(arch: &ArchSpec, action: usize) -> Result<()> {
    if action >= arch.n_actions() {
        return Err(Error::Dimension { context: "action id bound", expected: arch.n_actions(), got: action });
    }
    Ok(())
}

fn check_window<S>(arch: &ArchSpec, history: &HistoryWindow<S>) -> Result<()> {
    if history.pairs.len() != arch.history {
        return Err(Error::Dimension { context: "history length", expected: arch.history, got: history.pairs.len() });
    }
    for (s, a) in &history.pairs {
        check_state(arch, s)?;
        check_action(arch, *a)?;
    }
    Ok(())
}

fn check_item<S>(arch: &ArchSpec, item: &BatchItem<S>) -> Result<()> {
    check_window(arch, &item.history)?;
    item.actions.iter().try_for_each(|a| check_action(arch, *a))?;
    item.targets.iter().try_for_each(|s| check_state(arch, s))
}

/// The network and the frame algebra around it, for one parameter vector.
struct Net<'a, S> {
    arch: &'a ArchSpec,
    layers: Vec<Layer>,
    theta: &'a [S],
}

impl<'a, S: Scalar> Net<'a, S> {
    fn new(params: &'a ModelParams<S>) -> Self {
        Self { arch: &params.arch, layers: params.arch.layers(), theta: &params.theta }
    }

    fn encode(&self, states: &[Vec<S>], actions: &[usize]) -> Vec<S> {
        let arch = self.arch;
        let d = arch.state_dim;
        let block = d + arch.actions.dim();
        let anchor = &states[states.len() - 1];
        let mut x = vec![S::zero(); arch.input_dim()];
        for (k, (s, &a)) in states.iter().zip(actions).enumerate() {
            let out = &mut x[k * block..(k + 1) * block];
            for m in 0..d {
                out[m] = s[m];
            }
            if let Some(frame) = &arch.frame {
                let h = anchor[frame.heading];
                let (sn, c) = (h.sin(), h.cos());
                let (ox, oy) = frame.origin();
                for &(i, j) in &frame.points {
                    let (dx, dy) = (s[i] - anchor[ox], s[j] - anchor[oy]);
                    out[i] = c * dx + sn * dy;
                    out[j] = c * dy - sn * dx;
                }
                for &(i, j) in &frame.vectors {
                    out[i] = c * s[i] + sn * s[j];
                    out[j] = c * s[j] - sn * s[i];
                }
                out[frame.heading] = wrap_angle(s[frame.heading] - h);
            }
            for m in 0..d {
                out[m] /= S::of(arch.scale[m]);
            }
            arch.actions.write(a, &mut out[d..]);
        }
        x
    }

    /// Accumulates `∂x/∂states · dx` into `dstates`.
    fn encode_backward(&self, states: &[Vec<S>], dx: &[S], dstates: &mut [Vec<S>]) {
        let arch = self.arch;
        let d = arch.state_dim;
        let block = d + arch.actions.dim();
        let n = states.len();
        let anchor = &states[n - 1];
        let mut danchor = vec![S::zero(); d];
        for k in 0..n {
            let g: Vec<S> = (0..d).map(|m| dx[k * block + m] / S::of(arch.scale[m])).collect();
            let s = &states[k];
            let ds = &mut dstates[k];
            match &arch.frame {
                None => (0..d).for_each(|m| ds[m] += g[m]),
                Some(frame) => {
                    let hi = frame.heading;
                    let h = anchor[hi];
                    let (sn, c) = (h.sin(), h.cos());
                    let (ox, oy) = frame.origin();
                    let mut rotated = vec![false; d];
                    for (&(i, j), translated) in
                        frame.points.iter().map(|p| (p, true)).chain(frame.vectors.iter().map(|v| (v, false)))
                    {
                        rotated[i] = true;
                        rotated[j] = true;
                        let (vx, vy) =
                            if translated { (s[i] - anchor[ox], s[j] - anchor[oy]) } else { (s[i], s[j]) };
                        let (gi, gj) = (g[i], g[j]);
                        let dvx = c * gi - sn * gj;
                        let dvy = sn * gi + c * gj;
                        ds[i] += dvx;
                        ds[j] += dvy;
                        if translated {
                            danchor[ox] -= dvx;
                            danchor[oy] -= dvy;
                        }
                        // d/dh of (c vx + s vy, c vy − s vx)
                        danchor[hi] += gi * (c * vy - sn * vx) - gj * (sn * vy + c * vx);
                    }
                    ds[hi] += g[hi];
                    danchor[hi] -= g[hi];
                    rotated[hi] = true;
                    for m in (0..d).filter(|m| !rotated[*m]) {
                        ds[m] += g[m];
                    }
                }
            }
        }
        for m in 0..d {
            dstates[n - 1][m] += danchor[m];
        }
    }

    /// Next state from the newest state and the network output.
    fn lift(&self, anchor: &[S], out: &[S]) -> Vec<S> {
        let arch = self.arch;
        let delta: Vec<S> = out.iter().zip(&arch.scale).map(|(o, s)| *o * S::of(*s)).collect();
        let mut next: Vec<S> = anchor.iter().zip(&delta).map(|(a, d)| *a + *d).collect();
        if let Some(frame) = &arch.frame {
            let h = anchor[frame.heading];
            let (sn, c) = (h.sin(), h.cos());
            for (i, j) in frame.pairs() {
                next[i] = anchor[i] + c * delta[i] - sn * delta[j];
                next[j] = anchor[j] + sn * delta[i] + c * delta[j];
            }
            next[frame.heading] = wrap_angle(next[frame.heading]);
        }
        next
    }

    /// Given `dnext`, adds into `dout` and `danchor`.
    fn lift_backward(&self, anchor: &[S], out: &[S], dnext: &[S], dout: &mut [S], danchor: &mut [S]) {
        let arch = self.arch;
        for m in 0..arch.state_dim {
            danchor[m] += dnext[m];
            dout[m] += dnext[m] * S::of(arch.scale[m]);
        }
        if let Some(frame) = &arch.frame {
            let h = anchor[frame.heading];
            let (sn, c) = (h.sin(), h.cos());
            for (i, j) in frame.pairs() {
                let (si, sj) = (S::of(arch.scale[i]), S::of(arch.scale[j]));
                let (di, dj) = (out[i] * si, out[j] * sj);
                // undo the identity terms added above for rotated components
                dout[i] -= dnext[i] * si;
                dout[j] -= dnext[j] * sj;
                dout[i] += (c * dnext[i] + sn * dnext[j]) * si;
                dout[j] += (c * dnext[j] - sn * dnext[i]) * sj;
                danchor[frame.heading] += dnext[i] * (-sn * di - c * dj) + dnext[j] * (c * di - sn * dj);
            }
        }
    }

    /// True delta `s1 − s0` expressed in the frame of `s0`.
    fn ego_delta(&self, s0: &[S], s1: &[S]) -> Vec<S> {
        let mut delta: Vec<S> = s1.iter().zip(s0).map(|(a, b)| *a - *b).collect();
        if let Some(frame) = &self.arch.frame {
            let h = s0[frame.heading];
            let (sn, c) = (h.sin(), h.cos());
            for (i, j) in frame.pairs() {
                let (dx, dy) = (delta[i], delta[j]);
                delta[i] = c * dx + sn * dy;
                delta[j] = c * dy - sn * dx;
            }
            delta[frame.heading] = wrap_angle(delta[frame.heading]);
        }
        delta
    }

    fn mlp(&self, x: Vec<S>) -> Vec<Vec<S>> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (li, layer) in self.layers.iter().enumerate() {
            let input = &acts[li];
            let mut out = Vec::with_capacity(layer.fan_out);
            for o in 0..layer.fan_out {
                let row = &self.theta[layer.w + o * layer.fan_in..layer.w + (o + 1) * layer.fan_in];
                let mut z = self.theta[layer.b + o];
                for (w, x) in row.iter().zip(input) {
                    z += *w * *x;
                }
                out.push(if li == last { z } else { self.arch.activation.apply(z) });
            }
            acts.push(out);
        }
        acts
    }

    /// Backprop `dout` through the cached activations; returns `∂/∂input`.
    fn mlp_backward(&self, acts: &[Vec<S>], dout: Vec<S>, grad: &mut [S]) -> Vec<S> {
        let last = self.layers.len() - 1;
        let mut delta = dout;
        for (li, layer) in self.layers.iter().enumerate().rev() {
            if li != last {
                for (d, y) in delta.iter_mut().zip(&acts[li + 1]) {
                    *d *= self.arch.activation.slope(*y);
                }
            }
            let input = &acts[li];
            let mut prev = vec![S::zero(); layer.fan_in];
            for (o, &dz) in delta.iter().enumerate() {
                grad[layer.b + o] += dz;
                if dz == S::zero() {
                    continue;
                }
                let row = layer.w + o * layer.fan_in;
                for i in 0..layer.fan_in {
                    grad[row + i] += dz * input[i];
                    prev[i] += self.theta[row + i] * dz;
                }
            }
            delta = prev;
        }
        delta
    }

    /// Model-space next state from a model-space window.
    fn step(&self, states: &[Vec<S>], actions: &[usize]) -> Vec<S> {
        let acts = self.mlp(self.encode(states, actions));
        self.lift(&states[states.len() - 1], &acts[acts.len() - 1])
    }

    /// Multistep loss of one item; accumulates its gradient when asked.
    fn item_loss(&self, item: &BatchItem<S>, grad: Option<&mut [S]>) -> S {
        let arch = self.arch;
        let (k, l, d) = (arch.history, item.actions.len(), arch.state_dim);
        let eps = S::of(SMOOTH_EPS);
        let mut states: Vec<Vec<S>> = item.history.pairs.iter().map(|(s, _)| arch.to_model(s)).collect();
        let targets: Vec<Vec<S>> = item.targets.iter().map(|s| arch.to_model(s)).collect();
        let mut actions: Vec<usize> = item.history.pairs[..k - 1].iter().map(|p| p.1).collect();
        actions.extend(&item.actions);

        let want_grad = grad.is_some();
        let mut caches = Vec::new();
        let mut loss = S::zero();
        for j in 0..l {
            let acts = self.mlp(self.encode(&states[j..j + k], &actions[j..j + k]));
            let out = &acts[acts.len() - 1];
            let next = self.lift(&states[j + k - 1], out);
            let ego = self.ego_delta(&targets[j], &targets[j + 1]);
            // residual in scaled units, so no single feature's units dominate
            let r: Vec<S> = (0..d).map(|m| out[m] - ego[m] / S::of(arch.scale[m])).collect();
            let norm = (r.iter().map(|x| *x * *x).sum::<S>() + eps * eps).sqrt();
            loss += norm - eps;
            states.push(next);
            if want_grad {
                caches.push((acts, r, norm));
            }
        }

        if let Some(grad) = grad {
            let mut dstates = vec![vec![S::zero(); d]; k + l];
            for (j, (acts, r, norm)) in caches.iter().enumerate().rev() {
                let out = &acts[acts.len() - 1];
                let mut dout: Vec<S> = (0..d).map(|m| r[m] / *norm).collect();
                let dnext = dstates[k + j].clone();
                let mut danchor = vec![S::zero(); d];
                self.lift_backward(&states[j + k - 1], out, &dnext, &mut dout, &mut danchor);
                for m in 0..d {
                    dstates[j + k - 1][m] += danchor[m];
                }
                let dx = self.mlp_backward(acts, dout, grad);
                if j > 0 {
                    self.encode_backward(&states[j..j + k], &dx, &mut dstates[j..j + k]);
                }
            }
        }
        loss
    }

    fn mean_loss<'b>(&self, items: impl ExactSizeIterator<Item = &'b BatchItem<S>>, mut grad: Option<&mut Vec<S>>) -> S
    where
        S: 'b,
    {
        let n = items.len();
        if let Some(g) = grad.as_deref_mut() {
            *g = vec![S::zero(); self.theta.len()];
        }
        let mut total = S::zero();
        for item in items {
            total += self.item_loss(item, grad.as_deref_mut().map(|g| g.as_mut_slice()));
        }
        let inv = S::one() / S::of(n as f64);
        if let Some(g) = grad {
            g.iter_mut().for_each(|x| *x *= inv);
        }
        total * inv
    }
}

fn check_batch<S>(arch: &ArchSpec, batch: &Batch<S>) -> Result<()> {
    if batch.items.is_empty() {
        return Err(Error::Empty("batch"));
    }
    batch.items.iter().try_for_each(|i| check_item(arch, i))
}

/// One-step prediction of the state following `history` under `action`.
pub fn forward<S: Scalar>(params: &ModelParams<S>, history: &HistoryWindow<S>, action: usize) -> Result<Vec<S>> {
    Ok(rollout(params, history, &[action])?.remove(0))
}

/// Autoregressive predictions, one per action.
pub fn rollout<S: Scalar>(params: &ModelParams<S>, history: &HistoryWindow<S>, actions: &[usize]) -> Result<Vec<Vec<S>>> {
    if actions.is_empty() {
        return Err(Error::Empty("action sequence"));
    }
    let mut sim = Simulator::new(params, history)?;
    actions.iter().map(|&a| sim.step(a)).collect()
}

/// Incremental rollout state; cloning it forks the rollout (used by the tree
/// search to share prefixes).
#[derive(Clone)]
pub struct Simulator<'a, S> {
    params: &'a ModelParams<S>,
    states: VecDeque<Vec<S>>,
    actions: VecDeque<usize>,
}

impl<'a, S: Scalar> Simulator<'a, S> {
    pub fn new(params: &'a ModelParams<S>, history: &HistoryWindow<S>) -> Result<Self> {
        check_window(&params.arch, history)?;
        let k = params.arch.history;
        Ok(Self {
            params,
            states: history.pairs.iter().map(|(s, _)| params.arch.to_model(s)).collect(),
            actions: history.pairs[..k - 1].iter().map(|p| p.1).collect(),
        })
    }

    /// Predicts the next state under `action` and shifts the window.
    pub fn step(&mut self, action: usize) -> Result<Vec<S>> {
        check_action(&self.params.arch, action)?;
        let net = Net::new(self.params);
        self.actions.push_back(action);
        let states: Vec<Vec<S>> = self.states.iter().cloned().collect();
        let actions: Vec<usize> = self.actions.iter().copied().collect();
        let next = net.step(&states, &actions);
        self.states.pop_front();
        self.states.push_back(next.clone());
        self.actions.pop_front();
        Ok(self.params.arch.from_model(next))
    }
}

pub fn multistep_loss<S: Scalar>(params: &ModelParams<S>, batch: &Batch<S>) -> Result<S> {
    check_batch(&params.arch, batch)?;
    Ok(Net::new(params).mean_loss(batch.items.iter(), None))
}

pub fn grad_multistep_loss<S: Scalar>(params: &ModelParams<S>, batch: &Batch<S>) -> Result<(S, Vec<S>)> {
    check_batch(&params.arch, batch)?;
    let mut grad = Vec::new();
    let loss = Net::new(params).mean_loss(batch.items.iter(), Some(&mut grad));
    Ok((loss, grad))
}

/// `θ − α ∇L(θ; batch)`: one gradient step on the adaptation data.
pub fn adapt<S: Scalar>(params: &ModelParams<S>, batch: &Batch<S>, alpha_adapt: f64) -> Result<ModelParams<S>> {
    let (_, grad) = grad_multistep_loss(params, batch)?;
    Ok(params.with_theta(step_theta(&params.theta, &grad, alpha_adapt)))
}

fn step_theta<S: Scalar>(theta: &[S], grad: &[S], lr: f64) -> Vec<S> {
    if lr == 0.0 {
        return theta.to_vec();
    }
    let lr = S::of(lr);
    theta.iter().zip(grad).map(|(t, g)| *t - lr * *g).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Order {
    #[default]
    First,
    Second,
}

fn meta_gradient_items<S: Scalar>(
    params: &ModelParams<S>,
    adapt_batch: &Batch<S>,
    eval: &[&BatchItem<S>],
    alpha_adapt: f64,
    order: Order,
) -> Vec<S> {
    let net = Net::new(params);
    let mut g_adapt = Vec::new();
    net.mean_loss(adapt_batch.items.iter(), Some(&mut g_adapt));
    let adapted = params.with_theta(step_theta(&params.theta, &g_adapt, alpha_adapt));
    let mut g_post = Vec::new();
    Net::new(&adapted).mean_loss(eval.iter().copied(), Some(&mut g_post));
    if order == Order::First || alpha_adapt == 0.0 {
        return g_post;
    }
    // (I − α H) g_post with H g_post from the tangent part of a dual gradient.
    let dual_params = ModelParams {
        arch: params.arch.clone(),
        theta: params.theta.iter().zip(&g_post).map(|(t, v)| Dual::new(*t, *v)).collect(),
    };
    let dual_batch = adapt_batch.map(Dual::constant);
    let mut dual_grad = Vec::new();
    Net::new(&dual_params).mean_loss(dual_batch.items.iter(), Some(&mut dual_grad));
    let alpha = S::of(alpha_adapt);
    g_post.iter().zip(&dual_grad).map(|(g, hg)| *g - alpha * hg.eps).collect()
}

/// Gradient of `L(U(θ, adapt_batch); eval_batch)` with respect to `θ`.
pub fn meta_gradient<S: Scalar>(
    params: &ModelParams<S>,
    adapt_batch: &Batch<S>,
    eval_batch: &Batch<S>,
    alpha_adapt: f64,
    order: Order,
) -> Result<Vec<S>> {
    check_batch(&params.arch, adapt_batch)?;
    check_batch(&params.arch, eval_batch)?;
    let eval: Vec<&BatchItem<S>> = eval_batch.items.iter().collect();
    Ok(meta_gradient_items(params, adapt_batch, &eval, alpha_adapt, order))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct OptState<S> {
    kind: Optimizer,
    lr: f64,
    m: Vec<S>,
    v: Vec<S>,
    t: i32,
}

impl<S: Scalar> OptState<S> {
    fn new(kind: Optimizer, lr: f64, n: usize) -> Self {
        Self { kind, lr, m: vec![S::zero(); n], v: vec![S::zero(); n], t: 0 }
    }

    fn apply(&mut self, theta: &mut [S], grad: &[S]) {
        match self.kind {
            Optimizer::Sgd => {
                let lr = S::of(self.lr);
                theta.iter_mut().zip(grad).for_each(|(t, g)| *t -= lr * *g);
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let (b1, b2) = (S::of(beta1), S::of(beta2));
                let c1 = S::one() - b1.powi(self.t);
                let c2 = S::one() - b2.powi(self.t);
                let (lr, eps) = (S::of(self.lr), S::of(eps));
                for i in 0..theta.len() {
                    self.m[i] = b1 * self.m[i] + (S::one() - b1) * grad[i];
                    self.v[i] = b2 * self.v[i] + (S::one() - b2) * grad[i] * grad[i];
                    theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Deals indices in shuffled epochs.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn take<R: Rng>(&mut self, count: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha_adapt: f64,
    pub alpha_meta: f64,
    pub n_updates: usize,
    /// Evaluation items sampled per round per update.
    pub batch: usize,
    /// Rounds sampled per update.
    pub rounds_per_update: usize,
    pub order: Order,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha_adapt: 0.01,
            alpha_meta: 1e-3,
            n_updates: 50,
            batch: 128,
            rounds_per_update: 4,
            order: Order::First,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

/// One past round: adaptation data and the rollout data it is scored on.
#[derive(Clone, Debug)]
pub struct MetaRound<S> {
    pub adapt: Batch<S>,
    pub data: Batch<S>,
}

/// Follow-the-meta-leader steps on the post-adaptation loss of past rounds.
pub fn meta_train<S: Scalar>(params: &ModelParams<S>, rounds: &[MetaRound<S>], cfg: &TrainConfig) -> Result<ModelParams<S>> {
    if rounds.is_empty() {
        return Err(Error::Empty("meta-training rounds"));
    }
    for r in rounds {
        check_batch(&params.arch, &r.adapt)?;
        check_batch(&params.arch, &r.data)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut round_sampler = EpochSampler::new(rounds.len());
    let mut item_samplers: Vec<EpochSampler> = rounds.iter().map(|r| EpochSampler::new(r.data.len())).collect();
    let mut theta = params.theta.clone();
    let mut opt = OptState::new(cfg.optimizer, cfg.alpha_meta, theta.len());
    for _ in 0..cfg.n_updates {
        let current = params.with_theta(theta.clone());
        let picked = round_sampler.take(cfg.rounds_per_update.max(1), &mut rng);
        let mut total = vec![S::zero(); theta.len()];
        for &r in &picked {
            let idx = item_samplers[r].take(cfg.batch.max(1), &mut rng);
            let eval: Vec<&BatchItem<S>> = idx.iter().map(|&i| &rounds[r].data.items[i]).collect();
            let g = meta_gradient_items(&current, &rounds[r].adapt, &eval, cfg.alpha_adapt, cfg.order);
            total.iter_mut().zip(&g).for_each(|(t, g)| *t += *g);
        }
        let inv = S::one() / S::of(picked.len() as f64);
        total.iter_mut().for_each(|x| *x *= inv);
        opt.apply(&mut theta, &total);
    }
    Ok(params.with_theta(theta))
}

/// Seeded initialization followed by plain mini-batch training on the
/// multistep loss of the pooled offline data.
pub fn offline_warmstart<S: Scalar>(data: &[Batch<S>], arch: ArchSpec, cfg: &TrainConfig) -> Result<ModelParams<S>> {
    let params = ModelParams::init(arch, cfg.seed)?;
    fit(&params, data, cfg)
}

/// Plain (non-meta) mini-batch training from `params`.
pub fn fit<S: Scalar>(params: &ModelParams<S>, data: &[Batch<S>], cfg: &TrainConfig) -> Result<ModelParams<S>> {
    let pool: Vec<&BatchItem<S>> = data.iter().flat_map(|b| &b.items).collect();
    if pool.is_empty() {
        return Err(Error::Empty("offline data"));
    }
    pool.iter().try_for_each(|i| check_item(&params.arch, i))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0ff1);
    let mut sampler = EpochSampler::new(pool.len());
    let mut theta = params.theta.clone();
    let mut opt = OptState::new(cfg.optimizer, cfg.alpha_meta, theta.len());
    for _ in 0..cfg.n_updates {
        let current = params.with_theta(theta.clone());
        let idx = sampler.take(cfg.batch.max(1), &mut rng);
        let mut grad = Vec::new();
        Net::new(&current).mean_loss(idx.iter().map(|&i| pool[i]), Some(&mut grad));
        opt.apply(&mut theta, &grad);
    }
    Ok(params.with_theta(theta))
}

/// Header fields stored next to the parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub rollout_len: usize,
    pub seed: u64,
}

pub fn save_checkpoint<W: Write>(mut w: W, params: &ModelParams<f64>, info: &CheckpointInfo) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(params.arch.to_text().as_bytes())?;
    writeln!(w, "rollout_len = {}", info.rollout_len)?;
    writeln!(w, "seed = {}", info.seed)?;
    writeln!(w, "n_params = {}", params.theta.len())?;
    writeln!(w)?;
    for t in &params.theta {
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(mut r: R) -> Result<(ModelParams<f64>, CheckpointInfo)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut arch_text = String::new();
    let mut info = CheckpointInfo { rollout_len: 0, seed: 0 };
    let mut n_params = None;
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("header not terminated".into()));
        }
        let trimmed = line.trim();
        if trimmed.is_empty() {
            break;
        }
        let parse = |v: &str| v.trim().parse::<u64>().map_err(|e| Error::Checkpoint(format!("{trimmed}: {e}")));
        match trimmed.split_once('=').map(|(k, v)| (k.trim(), v)) {
            Some(("rollout_len", v)) => info.rollout_len = parse(v)? as usize,
            Some(("seed", v)) => info.seed = parse(v)?,
            Some(("n_params", v)) => n_params = Some(parse(v)? as usize),
            _ => arch_text.push_str(&line),
        }
    }
    let arch = ArchSpec::from_text(&arch_text)?;
    let n = n_params.ok_or_else(|| Error::Checkpoint("missing n_params".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * n {
        return Err(Error::Checkpoint(format!("expected {} parameter bytes, found {}", 8 * n, bytes.len())));
    }
    let theta = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    Ok((ModelParams::new(arch, theta)?, info))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_arch(hidden: Vec<usize>) -> ArchSpec {
        ArchSpec::new(2, ActionCoding::OneHot(3), 2, hidden)
    }

    fn planar_arch() -> ArchSpec {
        // x, y, heading, vx, vy, flag
        ArchSpec::new(6, ActionCoding::OneHot(2), 2, vec![4])
            .with_frame(PlanarFrame { heading: 2, points: vec![(0, 1)], vectors: vec![(3, 4)] })
            .with_scale(vec![2.0, 2.0, 0.5, 1.0, 1.0, 1.0])
    }

    fn random_batch(arch: &ArchSpec, items: usize, l: usize, seed: u64) -> Batch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = || (0..arch.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let mut out = Vec::new();
        for _ in 0..items {
            let history = HistoryWindow::new((0..arch.history).map(|i| (state(), i % arch.n_actions())).collect());
            let mut targets = vec![history.last_state().to_vec()];
            targets.extend((0..l).map(|_| state()));
            out.push(BatchItem { history, actions: (0..l).map(|i| (i * 7) % arch.n_actions()).collect(), targets });
        }
        Batch::new(out, l).unwrap()
    }

    #[test]
    fn zero_theta_predicts_last_state() {
        let params = ModelParams::<f64>::zeros(planar_arch()).unwrap();
        let history = HistoryWindow::new(vec![(vec![0.0, 0.0, 0.1, 1.0, 0.0, 1.0], 0), (vec![1.0, 2.0, 0.3, 1.0, 0.5, 0.0], 1)]);
        let preds = rollout(&params, &history, &[0, 1, 1]).unwrap();
        for p in preds {
            for (a, b) in p.iter().zip(history.last_state()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for arch in [plain_arch(vec![3]), planar_arch(), plain_arch(vec![]).with_activation(Activation::Relu)] {
            let params = ModelParams::<f64>::init(arch.clone(), 4).unwrap();
            let batch = random_batch(&arch, 3, 3, 9);
            let (_, grad) = grad_multistep_loss(&params, &batch).unwrap();
            for i in 0..params.theta.len() {
                let mut up = params.clone();
                up.theta[i] += 1e-5;
                let mut down = params.clone();
                down.theta[i] -= 1e-5;
                let fd = (multistep_loss(&up, &batch).unwrap() - multistep_loss(&down, &batch).unwrap()) / 2e-5;
                assert!((fd - grad[i]).abs() / grad[i].abs().max(1.0) < 1e-5, "param {i}: fd {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn alpha_zero_orders_coincide() {
        let arch = planar_arch();
        let params = ModelParams::<f64>::init(arch.clone(), 1).unwrap();
        let a = random_batch(&arch, 2, 2, 2);
        let e = random_batch(&arch, 2, 2, 3);
        let (_, plain) = grad_multistep_loss(&params, &e).unwrap();
        assert_eq!(meta_gradient(&params, &a, &e, 0.0, Order::First).unwrap(), plain);
        assert_eq!(meta_gradient(&params, &a, &e, 0.0, Order::Second).unwrap(), plain);
    }

    #[test]
    fn wrap_angle_range() {
        for x in [-10.0, -PI, -3.0, 0.0, 3.0, PI, 7.0] {
            let w = wrap_angle(x);
            assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            assert!(((x - w) / (2.0 * PI)).fract().abs() < 1e-12 || ((x - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-12);
        }
        assert_eq!(wrap_angle(PI), PI);
    }

    #[test]
    fn arch_text_round_trip() {
        let arch = planar_arch().with_neglog(vec![5], 40.0);
        assert_eq!(ArchSpec::from_text(&arch.to_text()).unwrap(), arch);
        let factored = ArchSpec::new(3, ActionCoding::Factored { base: 7, speeds: 3 }, 5, vec![8, 8]);
        assert_eq!(ArchSpec::from_text(&factored.to_text()).unwrap(), factored);
    }

    #[test]
    fn validation_catches_bad_arch() {
        assert!(plain_arch(vec![0]).validate().is_err());
        assert!(plain_arch(vec![2]).with_scale(vec![1.0]).validate().is_err());
        let clash = planar_arch().with_neglog(vec![0], 10.0);
        assert!(clash.validate().is_err());
    }
}
