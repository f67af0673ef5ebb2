//! The online loop on a stream of tabular MDPs, with a logit-table model so
//! every quantity in the regret analysis can be computed exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{memory_window, running_mean, subseed, train_config, substream, Purpose, RoundRecord, Source, Trajectory};
use crate::config::{EnvStream, StreamConfig, TabularStream, Variant};
use crate::dynmodel::{Order, TrainConfig};
use crate::error::{Error, Result};
use crate::planner::exact_tabular_planner;
use crate::tabular::{
    coverage_coeff, exact_occupancy, exact_value, kl_model_error, l1_model_error, sample_episode, Kernel, TabularMdp,
    TabularPolicy,
};
use crate::{Mdp, Policy};

/// `(s, a, s')`.
pub type Step = (usize, usize, usize);
pub type TabularRecord = RoundRecord<Step>;

/// Transition model `P̂(s'|s, a) = softmax(logits[s, a, ·])`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitModel {
    pub n_states: usize,
    pub n_actions: usize,
    pub logits: Vec<f64>,
}

impl LogitModel {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self { n_states, n_actions, logits: vec![0.0; n_states * n_actions * n_states] }
    }

    /// Logits reproducing `kernel` on its support (zeros map to a very negative logit).
    pub fn from_kernel(kernel: &Kernel<f64>) -> Self {
        let logits = kernel.probs().iter().map(|p| if *p > 0.0 { p.ln() } else { -700.0 }).collect();
        Self { n_states: kernel.n_states(), n_actions: kernel.n_actions(), logits }
    }

    /// Line-oriented text; logits print in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let logits: Vec<String> = self.logits.iter().map(|l| format!("{l:?}")).collect();
        format!("n_states = {}\nn_actions = {}\nlogits = {}\n", self.n_states, self.n_actions, logits.join(","))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("expected `key = value`: {line}")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Checkpoint(format!("missing {k}")));
        let count = |k: &str| get(k)?.parse::<usize>().map_err(|e| Error::Checkpoint(format!("{k}: {e}")));
        let (n_states, n_actions) = (count("n_states")?, count("n_actions")?);
        let logits = get("logits")?
            .split(',')
            .filter(|t| !t.is_empty())
            .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Checkpoint(format!("logit `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if logits.len() != n_states * n_actions * n_states {
            return Err(Error::Checkpoint(format!("expected {} logits, found {}", n_states * n_actions * n_states, logits.len())));
        }
        Ok(Self { n_states, n_actions, logits })
    }

    fn offset(&self, s: usize, a: usize) -> usize {
        (s * self.n_actions + a) * self.n_states
    }

    fn probs_row(&self, s: usize, a: usize) -> Vec<f64> {
        let o = self.offset(s, a);
        softmax(&self.logits[o..o + self.n_states])
    }

    pub fn kernel(&self) -> Result<Kernel<f64>> {
        let mut probs = Vec::with_capacity(self.logits.len());
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                probs.extend(self.probs_row(s, a));
            }
        }
        Kernel::new(self.n_states, self.n_actions, probs)
    }

    fn check(&self, steps: &[Step]) -> Result<()> {
        match steps.iter().find(|(s, a, sp)| *s >= self.n_states || *a >= self.n_actions || *sp >= self.n_states) {
            Some(bad) => Err(Error::Shape(format!("transition {bad:?} outside the model's table"))),
            None => Ok(()),
        }
    }

    /// Mean negative log-likelihood of `steps`.
    pub fn nll(&self, steps: &[Step]) -> Result<f64> {
        self.check(steps)?;
        if steps.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = steps
            .iter()
            .map(|&(s, a, sp)| {
                let row = &self.logits[self.offset(s, a)..self.offset(s, a) + self.n_states];
                log_sum_exp(row) - row[sp]
            })
            .sum();
        Ok(total / steps.len() as f64)
    }

    /// Gradient of [`nll`](Self::nll).
    pub fn grad(&self, steps: &[Step]) -> Result<Vec<f64>> {
        self.check(steps)?;
        let mut g = vec![0.0; self.logits.len()];
        if steps.is_empty() {
            return Ok(g);
        }
        let w = 1.0 / steps.len() as f64;
        for (s, a, counts) in self.row_counts(steps) {
            let o = self.offset(s, a);
            let n: f64 = counts.iter().sum();
            for (j, p) in self.probs_row(s, a).into_iter().enumerate() {
                g[o + j] += w * (n * p - counts[j]);
            }
        }
        Ok(g)
    }

    /// Hessian of [`nll`](Self::nll) times `v`: per visited row,
    /// `n_sa/N · (diag(p) − p pᵀ) v`.
    pub fn hessian_vec(&self, steps: &[Step], v: &[f64]) -> Result<Vec<f64>> {
        self.check(steps)?;
        if v.len() != self.logits.len() {
            return Err(Error::Dimension { context: "Hessian-vector product", expected: self.logits.len(), got: v.len() });
        }
        let mut out = vec![0.0; v.len()];
        if steps.is_empty() {
            return Ok(out);
        }
        let w = 1.0 / steps.len() as f64;
        for (s, a, counts) in self.row_counts(steps) {
            let o = self.offset(s, a);
            let n: f64 = counts.iter().sum();
            let p = self.probs_row(s, a);
            let pv: f64 = p.iter().zip(&v[o..o + self.n_states]).map(|(p, v)| p * v).sum();
            for j in 0..self.n_states {
                out[o + j] += w * n * p[j] * (v[o + j] - pv);
            }
        }
        Ok(out)
    }

    /// Gradient of the expected log-loss `Σ_{s,a} w(s,a)·E_{s'~target}[−log P̂(s'|s,a)]`,
    /// which differs from `Σ w·KL(target ‖ P̂)` by a constant.
    pub fn expected_grad(&self, target: &Kernel<f64>, weights: &[f64]) -> Result<Vec<f64>> {
        if target.n_states() != self.n_states || target.n_actions() != self.n_actions {
            return Err(Error::Shape("target kernel does not match the model's table".into()));
        }
        let rows = self.n_states * self.n_actions;
        if weights.len() != rows {
            return Err(Error::Dimension { context: "state-action weights", expected: rows, got: weights.len() });
        }
        let mut g = vec![0.0; self.logits.len()];
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = weights[s * self.n_actions + a];
                if w == 0.0 {
                    continue;
                }
                let o = self.offset(s, a);
                for (j, (p, q)) in self.probs_row(s, a).into_iter().zip(target.row(s, a)).enumerate() {
                    g[o + j] = w * (p - q);
                }
            }
        }
        Ok(g)
    }

    /// Visited rows with their next-state counts, in row order.
    fn row_counts(&self, steps: &[Step]) -> Vec<(usize, usize, Vec<f64>)> {
        let mut counts = vec![0.0; self.logits.len()];
        let mut seen = vec![false; self.n_states * self.n_actions];
        for &(s, a, sp) in steps {
            counts[self.offset(s, a) + sp] += 1.0;
            seen[s * self.n_actions + a] = true;
        }
        (0..seen.len())
            .filter(|&i| seen[i])
            .map(|i| {
                let (s, a) = (i / self.n_actions, i % self.n_actions);
                let o = self.offset(s, a);
                (s, a, counts[o..o + self.n_states].to_vec())
            })
            .collect()
    }

    /// One gradient step on the adaptation data.
    pub fn adapt(&self, steps: &[Step], alpha: f64) -> Result<Self> {
        let g = self.grad(steps)?;
        Ok(self.with_logits(self.logits.iter().zip(&g).map(|(l, g)| l - alpha * g).collect()))
    }

    fn with_logits(&self, logits: Vec<f64>) -> Self {
        Self { n_states: self.n_states, n_actions: self.n_actions, logits }
    }

    /// Gradient of `nll(U(θ, adapt); eval)` with respect to `θ`.
    pub fn meta_gradient(&self, adapt: &[Step], eval: &[Step], alpha: f64, order: Order) -> Result<Vec<f64>> {
        let post = self.adapt(adapt, alpha)?.grad(eval)?;
        if order == Order::First || alpha == 0.0 {
            return Ok(post);
        }
        let hv = self.hessian_vec(adapt, &post)?;
        Ok(post.iter().zip(&hv).map(|(g, h)| g - alpha * h).collect())
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// One past round for the table learner: adaptation steps and rollout steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRound {
    pub adapt: Vec<Step>,
    pub data: Vec<Step>,
}

/// Full-batch follow-the-meta-leader descent: every update averages the
/// meta-gradient over all given rounds.
pub fn meta_train_table(model: &LogitModel, rounds: &[TableRound], cfg: &TrainConfig) -> Result<LogitModel> {
    if rounds.is_empty() {
        return Err(Error::Empty("meta-training rounds"));
    }
    let mut current = model.clone();
    let inv = 1.0 / rounds.len() as f64;
    for _ in 0..cfg.n_updates {
        let mut total = vec![0.0; current.logits.len()];
        for r in rounds {
            let g = current.meta_gradient(&r.adapt, &r.data, cfg.alpha_adapt, cfg.order)?;
            total.iter_mut().zip(&g).for_each(|(t, g)| *t += g * inv);
        }
        current.logits.iter_mut().zip(&total).for_each(|(l, g)| *l -= cfg.alpha_meta * g);
    }
    Ok(current)
}

/// Plain full-batch descent on the pooled log-loss.
pub fn fit_table(model: &LogitModel, data: &[Step], lr: f64, n_updates: usize) -> Result<LogitModel> {
    let mut current = model.clone();
    for _ in 0..n_updates {
        let g = current.grad(data)?;
        current.logits.iter_mut().zip(&g).for_each(|(l, g)| *l -= lr * g);
    }
    Ok(current)
}

/// Exact per-round quantities of the analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDiagnostics {
    /// The round's true MDP.
    pub mdp: Mdp,
    /// Kernel of the model the round planned with.
    pub adapted: Kernel<f64>,
    pub policy: Policy,
    /// Optimal policy under the true kernel.
    pub optimal: Policy,
    /// Averaged occupancy of the explore policy.
    pub nu: Vec<f64>,
    /// Averaged occupancy of the planned policy.
    pub d_policy: Vec<f64>,
    /// `(1 − mix)·d_policy + mix·ν`.
    pub rho: Vec<f64>,
    pub kl: f64,
    pub l1: f64,
    pub j_policy: f64,
    pub j_optimal: f64,
    /// Coverage of the optimal policy's occupancy by `ν`.
    pub coverage_optimal: f64,
}

#[derive(Clone, Debug)]
pub struct TabularRun {
    pub config: StreamConfig,
    pub records: Vec<TabularRecord>,
    pub diagnostics: Vec<TabularDiagnostics>,
    pub warm: LogitModel,
    pub snapshots: Vec<LogitModel>,
    pub running: Vec<f64>,
}

impl TabularRun {
    pub fn model_before(&self, t: usize) -> &LogitModel {
        if t <= 1 {
            &self.warm
        } else {
            &self.snapshots[t - 2]
        }
    }
}

fn tabular_stream(cfg: &StreamConfig) -> Result<&TabularStream> {
    match &cfg.env {
        EnvStream::Tabular(t) => Ok(t),
        EnvStream::Drive(_) => Err(Error::config("env.kind", "expected a tabular stream")),
    }
}

/// Shared costs, start distribution and base kernel of the stream.
pub fn base_mdp(cfg: &StreamConfig) -> Result<Mdp> {
    let t = tabular_stream(cfg)?;
    Ok(TabularMdp::random(t.n_states, t.n_actions, cfg.horizon, &mut substream(cfg.seed, Purpose::Kernel, 0, 0)))
}

/// True MDP of stream slot `slot`: the base kernel with its logits perturbed
/// by the drift. Online rounds use slots `1..=T`, offline rounds `T+1..`.
pub fn slot_mdp(cfg: &StreamConfig, base: &Mdp, slot: usize) -> Result<Mdp> {
    let drift = tabular_stream(cfg)?.drift;
    if drift == 0.0 {
        return Ok(base.clone());
    }
    let mut rng = substream(cfg.seed, Purpose::Kernel, slot, 0);
    let mut model = LogitModel::from_kernel(base.kernel());
    for l in &mut model.logits {
        let z: f64 = StandardNormal.sample(&mut rng);
        *l += drift * z;
    }
    base.with_kernel(model.kernel()?)
}

fn episode(mdp: &Mdp, pi: &Policy, rng: &mut ChaCha8Rng, round: usize, source: Source) -> Trajectory<Step> {
    let steps = sample_episode(mdp, pi, rng);
    let cost = steps.iter().map(|&(s, a, _)| mdp.cost(s, a)).sum();
    Trajectory { round, source, steps, cost, collisions: 0, missed_turns: 0 }
}

/// Exact diagnostics of planning with `model_kernel` in round MDP `mdp`.
pub fn diagnose(mdp: &Mdp, model_kernel: Kernel<f64>, mix_prob: f64) -> Result<TabularDiagnostics> {
    let policy = exact_tabular_planner(&mdp.with_kernel(model_kernel.clone())?)?;
    let optimal = exact_tabular_planner(mdp)?;
    let explore = TabularPolicy::uniform(mdp.horizon(), mdp.n_states(), mdp.n_actions());
    let nu = exact_occupancy(mdp, &explore)?.averaged;
    let d_policy = exact_occupancy(mdp, &policy)?.averaged;
    let d_optimal = exact_occupancy(mdp, &optimal)?.averaged;
    let rho: Vec<f64> = d_policy.iter().zip(&nu).map(|(d, n)| (1.0 - mix_prob) * d + mix_prob * n).collect();
    Ok(TabularDiagnostics {
        kl: kl_model_error(&model_kernel, mdp, &rho)?,
        l1: l1_model_error(&model_kernel, mdp, &rho)?,
        j_policy: exact_value(mdp, &policy)?.j,
        j_optimal: exact_value(mdp, &optimal)?.j,
        coverage_optimal: coverage_coeff(&d_optimal, &nu)?,
        mdp: mdp.clone(),
        adapted: model_kernel,
        policy,
        optimal,
        nu,
        d_policy,
        rho,
    })
}

/// Plain fit to explore episodes from offline slots of the stream.
pub fn tabular_warm_start(cfg: &StreamConfig) -> Result<LogitModel> {
    cfg.validate()?;
    warm_table(cfg, &base_mdp(cfg)?)
}

fn warm_table(cfg: &StreamConfig, base: &Mdp) -> Result<LogitModel> {
    let stream = tabular_stream(cfg)?;
    let explore = TabularPolicy::uniform(cfg.horizon, stream.n_states, stream.n_actions);
    let mut offline = Vec::new();
    for m in 0..stream.offline_rounds {
        let mdp = slot_mdp(cfg, base, cfg.rounds + 1 + m)?;
        let mut rng = substream(cfg.seed, Purpose::Episode, cfg.rounds + 1 + m, 0);
        offline.extend(episode(&mdp, &explore, &mut rng, 0, Source::Explore).steps);
    }
    fit_table(&LogitModel::zeros(stream.n_states, stream.n_actions), &offline, cfg.hyper.warm_lr, cfg.hyper.warm_updates)
}

pub fn run_tabular_stream(cfg: &StreamConfig) -> Result<TabularRun> {
    cfg.validate()?;
    let stream = tabular_stream(cfg)?;
    let base = base_mdp(cfg)?;
    let (ns, na, hz) = (stream.n_states, stream.n_actions, cfg.horizon);
    let explore = TabularPolicy::uniform(hz, ns, na);

    let warm = warm_table(cfg, &base)?;

    let mut meta = warm.clone();
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut diagnostics = Vec::with_capacity(cfg.rounds);
    let mut snapshots = Vec::with_capacity(cfg.rounds);
    let mut rounds: Vec<TableRound> = Vec::new();
    for t in 1..=cfg.rounds {
        let mut round = || -> Result<(TabularRecord, TabularDiagnostics)> {
            let mdp = slot_mdp(cfg, &base, t)?;
            let tau = episode(&mdp, &explore, &mut substream(cfg.seed, Purpose::Episode, t, 0), t, Source::Explore);
            let model = match cfg.variant {
                Variant::SysId | Variant::Explore => meta.clone(),
                Variant::Adapt | Variant::AdaptSpeed => meta.adapt(&tau.steps, cfg.hyper.alpha_adapt)?,
            };
            let diag = diagnose(&mdp, model.kernel()?, cfg.mix_prob)?;
            let mut data = Vec::with_capacity(cfg.rollouts);
            for k in 1..=cfg.rollouts {
                let coin = substream(cfg.seed, Purpose::Coin, t, k).random::<f64>() < cfg.mix_prob;
                let (source, pi) = match (coin, cfg.variant) {
                    (true, _) => (Source::Explore, &explore),
                    (false, Variant::Explore) => (Source::Policy, &explore),
                    (false, _) => (Source::Policy, &diag.policy),
                };
                data.push(episode(&mdp, pi, &mut substream(cfg.seed, Purpose::Episode, t, k), t, source));
            }
            rounds.push(TableRound {
                adapt: tau.steps.clone(),
                data: data.iter().flat_map(|d| d.steps.iter().copied()).collect(),
            });
            let window = memory_window(t, cfg.hyper.memory_cap);
            let train = train_config(cfg, subseed(cfg.seed, Purpose::Train, t, 0));
            if cfg.variant != Variant::Explore && train.n_updates > 0 {
                meta = meta_train_table(&meta, &rounds[window], &train)?;
            }
            Ok((RoundRecord::new(t, tau, data), diag))
        };
        let (record, diag) = round().map_err(|e| Error::Round { round: t, source: Box::new(e) })?;
        records.push(record);
        diagnostics.push(diag);
        snapshots.push(meta.clone());
    }
    let running = running_mean(records.iter().map(|r| r.policy_cost()));
    Ok(TabularRun { config: cfg.clone(), records, diagnostics, warm, snapshots, running })
}

/// Exact per-round gap `J(π̂_t) − J(π^h_t)` between the run's policies and
/// those of a hindsight meta model trained on every round with as many
/// updates as the whole run made.
pub fn hindsight_regret(run: &TabularRun) -> Result<Vec<f64>> {
    let cfg = &run.config;
    let rounds: Vec<TableRound> = run
        .records
        .iter()
        .map(|r| TableRound {
            adapt: r.tau.steps.clone(),
            data: r.data.iter().flat_map(|d| d.steps.iter().copied()).collect(),
        })
        .collect();
    let mut train = train_config(cfg, subseed(cfg.seed, Purpose::Hindsight, 0, 0));
    train.n_updates *= rounds.len();
    if cfg.variant == Variant::Explore {
        return Ok(vec![0.0; rounds.len()]);
    }
    let hindsight = meta_train_table(&run.warm, &rounds, &train)?;
    run.diagnostics
        .iter()
        .zip(&rounds)
        .map(|(diag, r)| {
            let model = if cfg.variant.adapts() { hindsight.adapt(&r.adapt, cfg.hyper.alpha_adapt)? } else { hindsight.clone() };
            let pi = exact_tabular_planner(&diag.mdp.with_kernel(model.kernel()?)?)?;
            Ok(diag.j_policy - exact_value(&diag.mdp, &pi)?.j)
        })
        .collect()
}
