//! Exact finite-horizon MDPs and the brute-force quantities built on them:
//! occupancy measures, policy values, coverage coefficients and model errors.
//!
//! All tensors are flat row-major vectors: kernels are `[s][a][s']`, cost and
//! state-action distributions are `[s][a]`, policies are `[h][s][a]`.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn simplex_tol<S: Scalar>() -> S {
    S::of(1e-12).max(S::epsilon() * S::of(64.0))
}

fn check_simplex<S: Scalar>(row: &[S], context: &'static str) -> Result<()> {
    let mut total = S::zero();
    for &p in row {
        if !(p >= S::zero()) || !p.is_finite() {
            return Err(Error::Distribution { context, detail: format!("entry {p} is not a probability") });
        }
        total += p;
    }
    if (total - S::one()).abs() > simplex_tol::<S>() {
        return Err(Error::Distribution { context, detail: format!("sums to {total}") });
    }
    Ok(())
}

/// Draws a point uniformly from the probability simplex (Dirichlet(1,…,1)).
pub fn dirichlet_ones<S: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<S> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| S::of(x / total)).collect()
}

/// Samples an index from a categorical distribution.
pub fn sample_categorical<S: Scalar, R: Rng + ?Sized>(probs: &[S], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64_lossy();
        if u < acc {
            return i;
        }
    }
    // round-off: fall back to the last index with positive mass
    probs.iter().rposition(|p| *p > S::zero()).unwrap_or(probs.len() - 1)
}

/// Transition kernel `P(s' | s, a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<S> {
    n_states: usize,
    n_actions: usize,
    probs: Vec<S>,
}

impl<S: Scalar> Kernel<S> {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<S>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Shape("kernel needs at least one state and action".into()));
        }
        let want = n_states * n_actions * n_states;
        if probs.len() != want {
            return Err(Error::Dimension { context: "kernel", expected: want, got: probs.len() });
        }
        for row in probs.chunks(n_states) {
            check_simplex(row, "kernel row")?;
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = S::one() / S::of(n_states as f64);
        Self { n_states, n_actions, probs: vec![p; n_states * n_actions * n_states] }
    }

    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut probs = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            probs.extend(dirichlet_ones::<S, _>(n_states, rng));
        }
        Self { n_states, n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[S] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.probs[start..start + self.n_states]
    }

    fn same_shape(&self, other: &Kernel<S>) -> Result<()> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(Error::Shape(format!(
                "kernels {}x{} vs {}x{}",
                self.n_states, self.n_actions, other.n_states, other.n_actions
            )));
        }
        Ok(())
    }
}

/// Finite-horizon MDP `(S, A, P, C, H, μ)` with costs in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp<S> {
    kernel: Kernel<S>,
    costs: Vec<S>,
    init: Vec<S>,
    horizon: usize,
}

impl<S: Scalar> TabularMdp<S> {
    pub fn new(kernel: Kernel<S>, costs: Vec<S>, init: Vec<S>, horizon: usize) -> Result<Self> {
        let (ns, na) = (kernel.n_states, kernel.n_actions);
        if horizon == 0 {
            return Err(Error::Shape("horizon must be at least 1".into()));
        }
        if costs.len() != ns * na {
            return Err(Error::Dimension { context: "costs", expected: ns * na, got: costs.len() });
        }
        if let Some(c) = costs.iter().find(|c| !(**c >= S::zero() && **c <= S::one())) {
            return Err(Error::Distribution { context: "costs", detail: format!("cost {c} outside [0, 1]") });
        }
        if init.len() != ns {
            return Err(Error::Dimension { context: "initial distribution", expected: ns, got: init.len() });
        }
        check_simplex(&init, "initial distribution")?;
        Ok(Self { kernel, costs, init, horizon })
    }

    /// Dirichlet(1) transition rows and initial distribution, uniform costs.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, horizon: usize, rng: &mut R) -> Self {
        let kernel = Kernel::random(n_states, n_actions, rng);
        let costs = (0..n_states * n_actions).map(|_| S::of(rng.random::<f64>())).collect();
        let init = dirichlet_ones(n_states, rng);
        Self { kernel, costs, init, horizon }
    }

    pub fn n_states(&self) -> usize {
        self.kernel.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.kernel.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn kernel(&self) -> &Kernel<S> {
        &self.kernel
    }

    pub fn costs(&self) -> &[S] {
        &self.costs
    }

    pub fn init(&self) -> &[S] {
        &self.init
    }

    #[inline]
    pub fn cost(&self, s: usize, a: usize) -> S {
        self.costs[s * self.kernel.n_actions + a]
    }

    /// Same costs, horizon and start distribution, different dynamics.
    pub fn with_kernel(&self, kernel: Kernel<S>) -> Result<Self> {
        self.kernel.same_shape(&kernel)?;
        Ok(Self { kernel, costs: self.costs.clone(), init: self.init.clone(), horizon: self.horizon })
    }

    pub fn with_costs(&self, costs: Vec<S>) -> Result<Self> {
        Self::new(self.kernel.clone(), costs, self.init.clone(), self.horizon)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[S]| v.iter().map(|x| format!("{:?}", x.to_f64_lossy())).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        let _ = writeln!(out, "n_states = {}", self.n_states());
        let _ = writeln!(out, "n_actions = {}", self.n_actions());
        let _ = writeln!(out, "horizon = {}", self.horizon);
        let _ = writeln!(out, "init = {}", join(&self.init));
        let _ = writeln!(out, "costs = {}", join(&self.costs));
        let _ = writeln!(out, "transitions = {}", join(&self.kernel.probs));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut ns = None;
        let mut na = None;
        let mut horizon = None;
        let mut init = None;
        let mut costs = None;
        let mut trans = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            let count = || value.parse::<usize>().map_err(|e| Error::config(key, e.to_string()));
            let floats = || -> Result<Vec<S>> {
                value
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map(S::of).map_err(|e| Error::config(key, e.to_string())))
                    .collect()
            };
            match key {
                "n_states" => ns = Some(count()?),
                "n_actions" => na = Some(count()?),
                "horizon" => horizon = Some(count()?),
                "init" => init = Some(floats()?),
                "costs" => costs = Some(floats()?),
                "transitions" => trans = Some(floats()?),
                other => return Err(Error::config(other, "unknown key")),
            }
        }
        let missing = |k: &str| Error::config(k, "missing");
        let kernel = Kernel::new(
            ns.ok_or_else(|| missing("n_states"))?,
            na.ok_or_else(|| missing("n_actions"))?,
            trans.ok_or_else(|| missing("transitions"))?,
        )?;
        Self::new(
            kernel,
            costs.ok_or_else(|| missing("costs"))?,
            init.ok_or_else(|| missing("init"))?,
            horizon.ok_or_else(|| missing("horizon"))?,
        )
    }
}

/// Time-dependent stochastic policy `π_h(a | s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy<S> {
    horizon: usize,
    n_states: usize,
    n_actions: usize,
    probs: Vec<S>,
}

impl<S: Scalar> TabularPolicy<S> {
    pub fn new(horizon: usize, n_states: usize, n_actions: usize, probs: Vec<S>) -> Result<Self> {
        let want = horizon * n_states * n_actions;
        if probs.len() != want {
            return Err(Error::Dimension { context: "policy", expected: want, got: probs.len() });
        }
        for row in probs.chunks(n_actions) {
            check_simplex(row, "policy row")?;
        }
        Ok(Self { horizon, n_states, n_actions, probs })
    }

    pub fn uniform(horizon: usize, n_states: usize, n_actions: usize) -> Self {
        let p = S::one() / S::of(n_actions as f64);
        Self { horizon, n_states, n_actions, probs: vec![p; horizon * n_states * n_actions] }
    }

    /// Deterministic policy from an action table `[h][s]`.
    pub fn deterministic(horizon: usize, n_states: usize, n_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != horizon * n_states {
            return Err(Error::Dimension { context: "action table", expected: horizon * n_states, got: actions.len() });
        }
        let mut probs = vec![S::zero(); horizon * n_states * n_actions];
        for (i, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::Shape(format!("action {a} out of range")));
            }
            probs[i * n_actions + a] = S::one();
        }
        Ok(Self { horizon, n_states, n_actions, probs })
    }

    pub fn random<R: Rng + ?Sized>(horizon: usize, n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let mut probs = Vec::with_capacity(horizon * n_states * n_actions);
        for _ in 0..horizon * n_states {
            probs.extend(dirichlet_ones::<S, _>(n_actions, rng));
        }
        Self { horizon, n_states, n_actions, probs }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    #[inline]
    pub fn row(&self, h: usize, s: usize) -> &[S] {
        let start = (h * self.n_states + s) * self.n_actions;
        &self.probs[start..start + self.n_actions]
    }

    fn check_against(&self, mdp: &TabularMdp<S>) -> Result<()> {
        if self.horizon != mdp.horizon || self.n_states != mdp.n_states() || self.n_actions != mdp.n_actions() {
            return Err(Error::Shape(format!(
                "policy (H={}, S={}, A={}) vs mdp (H={}, S={}, A={})",
                self.horizon,
                self.n_states,
                self.n_actions,
                mdp.horizon,
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Ok(())
    }
}

/// State-action occupancy: per-step `d_h(s, a)` and the horizon average.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy<S> {
    pub horizon: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub per_step: Vec<S>,
    pub averaged: Vec<S>,
}

impl<S: Scalar> Occupancy<S> {
    #[inline]
    pub fn step(&self, h: usize) -> &[S] {
        let n = self.n_states * self.n_actions;
        &self.per_step[h * n..(h + 1) * n]
    }
}

/// Forward recursion for `d_h(s, a)` under `mdp` and `pi`.
pub fn exact_occupancy<S: Scalar>(mdp: &TabularMdp<S>, pi: &TabularPolicy<S>) -> Result<Occupancy<S>> {
    pi.check_against(mdp)?;
    let (ns, na, hz) = (mdp.n_states(), mdp.n_actions(), mdp.horizon);
    let n = ns * na;
    let mut per_step = vec![S::zero(); hz * n];
    let mut state_dist = mdp.init.clone();
    for h in 0..hz {
        let slice = &mut per_step[h * n..(h + 1) * n];
        for s in 0..ns {
            for (a, p) in pi.row(h, s).iter().enumerate() {
                slice[s * na + a] = state_dist[s] * *p;
            }
        }
        let mut next = vec![S::zero(); ns];
        for s in 0..ns {
            for a in 0..na {
                let w = slice[s * na + a];
                if w == S::zero() {
                    continue;
                }
                for (sp, p) in mdp.kernel.row(s, a).iter().enumerate() {
                    next[sp] += w * *p;
                }
            }
        }
        state_dist = next;
    }
    let inv_h = S::one() / S::of(hz as f64);
    let mut averaged = vec![S::zero(); n];
    for h in 0..hz {
        for i in 0..n {
            averaged[i] += per_step[h * n + i];
        }
    }
    averaged.iter_mut().for_each(|x| *x *= inv_h);
    Ok(Occupancy { horizon: hz, n_states: ns, n_actions: na, per_step, averaged })
}

/// Policy value by backward induction.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyValue<S> {
    /// `J = Σ_s μ(s) V_0(s)`.
    pub j: S,
    /// `V_h(s)` for `h < H`, row-major `[h][s]`.
    pub v: Vec<S>,
    pub n_states: usize,
    pub horizon: usize,
}

impl<S: Scalar> PolicyValue<S> {
    /// `V_h(s)`, with `V_H ≡ 0`.
    #[inline]
    pub fn at(&self, h: usize, s: usize) -> S {
        if h >= self.horizon {
            S::zero()
        } else {
            self.v[h * self.n_states + s]
        }
    }
}

/// `E_{s' ~ row}[V_h(s')]`.
#[inline]
pub fn expect_next<S: Scalar>(row: &[S], value: &PolicyValue<S>, h: usize) -> S {
    row.iter().enumerate().map(|(sp, p)| *p * value.at(h, sp)).sum()
}

pub fn exact_value<S: Scalar>(mdp: &TabularMdp<S>, pi: &TabularPolicy<S>) -> Result<PolicyValue<S>> {
    pi.check_against(mdp)?;
    let (ns, hz) = (mdp.n_states(), mdp.horizon);
    let mut value = PolicyValue { j: S::zero(), v: vec![S::zero(); hz * ns], n_states: ns, horizon: hz };
    for h in (0..hz).rev() {
        for s in 0..ns {
            let mut vs = S::zero();
            for (a, p) in pi.row(h, s).iter().enumerate() {
                if *p == S::zero() {
                    continue;
                }
                let q = mdp.cost(s, a) + expect_next(mdp.kernel.row(s, a), &value, h + 1);
                vs += *p * q;
            }
            value.v[h * ns + s] = vs;
        }
    }
    value.j = (0..ns).map(|s| mdp.init[s] * value.v[s]).sum();
    Ok(value)
}

/// `sup_{s,a} d(s,a) / ν(s,a)` over cells where `d > 0`; `+∞` when `ν` misses
/// part of `d`'s support.
pub fn coverage_coeff<S: Scalar>(d: &[S], nu: &[S]) -> Result<S> {
    if d.len() != nu.len() {
        return Err(Error::Dimension { context: "coverage coefficient", expected: d.len(), got: nu.len() });
    }
    let mut best = S::zero();
    for (&dv, &nv) in d.iter().zip(nu) {
        if dv <= S::zero() {
            continue;
        }
        if nv <= S::zero() {
            return Ok(S::infinity());
        }
        best = best.max(dv / nv);
    }
    Ok(best)
}

fn check_error_shapes<S: Scalar>(phat: &Kernel<S>, mdp: &TabularMdp<S>, rho: &[S]) -> Result<()> {
    phat.same_shape(&mdp.kernel)?;
    let n = mdp.n_states() * mdp.n_actions();
    if rho.len() != n {
        return Err(Error::Dimension { context: "state-action distribution", expected: n, got: rho.len() });
    }
    Ok(())
}

/// `KL(p ‖ q)` for one pair of rows; `+∞` if `q` misses `p`'s support.
pub fn kl_rows<S: Scalar>(p: &[S], q: &[S]) -> S {
    let mut total = S::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= S::zero() {
            continue;
        }
        if qi <= S::zero() {
            return S::infinity();
        }
        total += pi * (pi / qi).ln();
    }
    total.max(S::zero())
}

pub fn l1_rows<S: Scalar>(p: &[S], q: &[S]) -> S {
    p.iter().zip(q).map(|(a, b)| (*a - *b).abs()).sum()
}

/// `Σ_{s,a} ρ(s,a) · KL(P(·|s,a) ‖ P̂(·|s,a))`, true kernel first.
pub fn kl_model_error<S: Scalar>(phat: &Kernel<S>, mdp: &TabularMdp<S>, rho: &[S]) -> Result<S> {
    check_error_shapes(phat, mdp, rho)?;
    let na = mdp.n_actions();
    let mut total = S::zero();
    for (i, &w) in rho.iter().enumerate() {
        if w <= S::zero() {
            continue;
        }
        let (s, a) = (i / na, i % na);
        let kl = kl_rows(mdp.kernel.row(s, a), phat.row(s, a));
        if kl.is_infinite() {
            return Ok(S::infinity());
        }
        total += w * kl;
    }
    Ok(total)
}

/// `Σ_{s,a} ρ(s,a) · ‖P̂(·|s,a) − P(·|s,a)‖₁`.
pub fn l1_model_error<S: Scalar>(phat: &Kernel<S>, mdp: &TabularMdp<S>, rho: &[S]) -> Result<S> {
    check_error_shapes(phat, mdp, rho)?;
    let na = mdp.n_actions();
    Ok(rho
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > S::zero())
        .map(|(i, &w)| w * l1_rows(phat.row(i / na, i % na), mdp.kernel.row(i / na, i % na)))
        .sum())
}

/// One sampled episode as `(s, a, s')` triples.
pub fn sample_episode<S: Scalar, R: Rng + ?Sized>(
    mdp: &TabularMdp<S>,
    pi: &TabularPolicy<S>,
    rng: &mut R,
) -> Vec<(usize, usize, usize)> {
    let mut s = sample_categorical(&mdp.init, rng);
    let mut steps = Vec::with_capacity(mdp.horizon);
    for h in 0..mdp.horizon {
        let a = sample_categorical(pi.row(h, s), rng);
        let sp = sample_categorical(mdp.kernel.row(s, a), rng);
        steps.push((s, a, sp));
        s = sp;
    }
    steps
}
