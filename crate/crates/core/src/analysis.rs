//! Exact numeric checks of the regret analysis: the simulation lemma, the
//! performance-difference bounds, the Pinsker–Jensen chain on model error and
//! follow-the-meta-leader regret on strongly convex toy losses.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::online::tabular::{LogitModel, Step, TabularDiagnostics, TabularRun};
use crate::scalar::Scalar;
use crate::tabular::{
    coverage_coeff, exact_occupancy, exact_value, expect_next, kl_model_error, l1_model_error, TabularMdp, TabularPolicy,
};
use crate::Policy;

/// Slack below which a report fails.
pub const SLACK_TOL: f64 = 1e-9;

/// Both sides of the simulation lemma for `π` on `m1 = (C, P)` and `m2 = (C', P')`:
///
/// `J(π; C, P) − J(π; C', P') = Σ_h E_{(s,a)~d_h}[C − C' + E_P V'_{h+1} − E_{P'} V'_{h+1}]`
///
/// with `d_h` the occupancy of `π` under `m1` and `V'` the value of `π` under `m2`.
pub fn simulation_lemma_check<S: Scalar>(m1: &TabularMdp<S>, m2: &TabularMdp<S>, pi: &TabularPolicy<S>) -> Result<(S, S)> {
    let (ns, na, hz) = (m1.n_states(), m1.n_actions(), m1.horizon());
    if (m2.n_states(), m2.n_actions(), m2.horizon()) != (ns, na, hz) {
        return Err(Error::Shape("the two MDPs differ in states, actions or horizon".into()));
    }
    if m1.init() != m2.init() {
        return Err(Error::Shape("the two MDPs have different initial distributions".into()));
    }
    let lhs = exact_value(m1, pi)?.j - exact_value(m2, pi)?.j;
    let occ = exact_occupancy(m1, pi)?;
    let v2 = exact_value(m2, pi)?;
    let mut rhs = S::zero();
    for h in 0..hz {
        let d = occ.step(h);
        for s in 0..ns {
            for a in 0..na {
                let w = d[s * na + a];
                if w == S::zero() {
                    continue;
                }
                let gap = m1.cost(s, a) - m2.cost(s, a) + expect_next(m1.kernel().row(s, a), &v2, h + 1)
                    - expect_next(m2.kernel().row(s, a), &v2, h + 1);
                rhs += w * gap;
            }
        }
    }
    Ok((lhs, rhs))
}

/// One inequality `lhs ≤ rhs` evaluated on recorded quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`.
    pub slack: f64,
    pub components: BTreeMap<String, f64>,
}

impl BoundReport {
    fn new(lhs: f64, rhs: f64, components: &[(&str, f64)]) -> Self {
        Self {
            lhs,
            rhs,
            slack: rhs - lhs,
            components: components.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    /// An infinite right-hand side (some coverage coefficient is unbounded).
    pub fn vacuous(&self) -> bool {
        self.rhs == f64::INFINITY
    }

    pub fn holds(&self) -> bool {
        self.vacuous() || self.slack >= -SLACK_TOL
    }
}

/// Per-round quantities shared by the bound checks, all under the round's
/// true MDP with `ρ_t = ½ d^{π̂_t} + ½ ν_t`.
#[derive(Clone, Debug, PartialEq)]
struct RoundTerms {
    gap: f64,
    /// Suboptimality of `π̂_t` on its own model against `π'_t` (zero for an exact planner).
    eps_oc: f64,
    coverage_cmp: f64,
    coverage_own: f64,
    l1_rho: f64,
    l1_nu: f64,
    kl_rho: f64,
    horizon: f64,
}

fn round_terms(diag: &TabularDiagnostics, cmp: &Policy) -> Result<RoundTerms> {
    let mdp = &diag.mdp;
    let model = mdp.with_kernel(diag.adapted.clone())?;
    let rho: Vec<f64> = diag.d_policy.iter().zip(&diag.nu).map(|(d, n)| 0.5 * (d + n)).collect();
    let d_cmp = exact_occupancy(mdp, cmp)?.averaged;
    let eps_oc = (exact_value(&model, &diag.policy)?.j - exact_value(&model, cmp)?.j).max(0.0);
    Ok(RoundTerms {
        gap: diag.j_policy - exact_value(mdp, cmp)?.j,
        eps_oc,
        coverage_cmp: coverage_coeff(&d_cmp, &diag.nu)?,
        coverage_own: coverage_coeff(&diag.d_policy, &diag.nu)?,
        l1_rho: l1_model_error(&diag.adapted, mdp, &rho)?,
        l1_nu: l1_model_error(&diag.adapted, mdp, &diag.nu)?,
        kl_rho: kl_model_error(&diag.adapted, mdp, &rho)?,
        horizon: mdp.horizon() as f64,
    })
}

fn all_terms(diags: &[TabularDiagnostics], comparison: &[Policy]) -> Result<Vec<RoundTerms>> {
    if diags.is_empty() {
        return Err(Error::Empty("run diagnostics"));
    }
    if comparison.len() != diags.len() {
        return Err(Error::Dimension { context: "comparison policies", expected: diags.len(), got: comparison.len() });
    }
    diags.iter().zip(comparison).map(|(d, c)| round_terms(d, c)).collect()
}

/// The averaged performance-difference bound over the first `t` rounds, for
/// every prefix `t`:
///
/// `(1/t)Σ (J(π̂_s) − J(π'_s)) ≤ ε_oc + 2·max_s c^{π'_s}_{ν_s}·H²·(1/t)Σ E_{ρ_s}‖P̂_s − P_s‖₁`.
pub fn perf_bound_check(diags: &[TabularDiagnostics], comparison: &[Policy]) -> Result<Vec<BoundReport>> {
    let terms = all_terms(diags, comparison)?;
    let mut out = Vec::with_capacity(terms.len());
    let (mut gap, mut l1, mut c_max, mut eps_oc) = (0.0, 0.0, 0.0f64, 0.0f64);
    for (i, r) in terms.iter().enumerate() {
        let t = (i + 1) as f64;
        gap += r.gap;
        l1 += r.l1_rho;
        c_max = c_max.max(r.coverage_cmp);
        eps_oc = eps_oc.max(r.eps_oc);
        let h2 = r.horizon * r.horizon;
        let model_term = if l1 == 0.0 { 0.0 } else { 2.0 * c_max * h2 * l1 / t };
        out.push(BoundReport::new(
            gap / t,
            eps_oc + model_term,
            &[("eps_oc", eps_oc), ("coverage_max", c_max), ("l1_mean", l1 / t), ("H", r.horizon), ("rounds", t)],
        ));
    }
    Ok(out)
}

/// The single-policy form, per round:
/// `J(π̂) − J(π') ≤ ε_oc + H²·(c^{π̂}_ν + c^{π'}_ν)·E_ν‖P̂ − P‖₁`.
pub fn single_round_bound_check(diags: &[TabularDiagnostics], comparison: &[Policy]) -> Result<Vec<BoundReport>> {
    Ok(all_terms(diags, comparison)?
        .into_iter()
        .map(|r| {
            let coverage = r.coverage_own + r.coverage_cmp;
            let model_term = if r.l1_nu == 0.0 { 0.0 } else { r.horizon * r.horizon * coverage * r.l1_nu };
            BoundReport::new(
                r.gap,
                r.eps_oc + model_term,
                &[
                    ("eps_oc", r.eps_oc),
                    ("coverage_policy", r.coverage_own),
                    ("coverage_comparison", r.coverage_cmp),
                    ("l1_explore", r.l1_nu),
                    ("H", r.horizon),
                ],
            )
        })
        .collect())
}

/// Least-squares line `y ≈ intercept + slope·x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    /// Residual sum of squares.
    pub rss: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension { context: "line fit", expected: xs.len(), got: ys.len() });
    }
    if xs.len() < 2 {
        return Err(Error::Empty("line fit points"));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let rss = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(LineFit { intercept, slope, rss })
}

/// The model-error side of the main theorem.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoremReport {
    /// The chain `(1/t)Σ E_ρ‖·‖₁ ≤ √((2/t)Σ E_ρ KL)` for every prefix `t`.
    pub chain: Vec<BoundReport>,
    /// The same chain for each round on its own.
    pub per_round: Vec<BoundReport>,
    /// Cumulative mean KL against `log(t)/t` (informational).
    pub kl_fit: Option<LineFit>,
    /// Best-in-class adapted KL, when a run was supplied to search over.
    pub eps_model: Option<f64>,
    /// `ε_oc + max_t c·H²·√ε_model`, the theorem's asymptotic term.
    pub asymptote: Option<f64>,
}

impl TheoremReport {
    pub fn holds(&self) -> bool {
        self.chain.iter().chain(&self.per_round).all(BoundReport::holds)
    }
}

pub fn theorem_bound_check(diags: &[TabularDiagnostics], comparison: &[Policy]) -> Result<TheoremReport> {
    let terms = all_terms(diags, comparison)?;
    let per_round = terms
        .iter()
        .map(|r| BoundReport::new(r.l1_rho, (2.0 * r.kl_rho).sqrt(), &[("kl", r.kl_rho), ("l1", r.l1_rho)]))
        .collect();
    let (mut l1, mut kl) = (0.0, 0.0);
    let mut chain = Vec::with_capacity(terms.len());
    let mut cumulative_kl = Vec::with_capacity(terms.len());
    for (i, r) in terms.iter().enumerate() {
        let t = (i + 1) as f64;
        l1 += r.l1_rho;
        kl += r.kl_rho;
        cumulative_kl.push(kl / t);
        chain.push(BoundReport::new(l1 / t, (2.0 * kl / t).sqrt(), &[("l1_mean", l1 / t), ("kl_mean", kl / t), ("rounds", t)]));
    }
    let xs: Vec<f64> = (1..=terms.len()).map(|t| (t as f64).ln() / t as f64).collect();
    let kl_fit = fit_line(&xs, &cumulative_kl).ok();
    Ok(TheoremReport { chain, per_round, kl_fit, eps_model: None, asymptote: None })
}

/// The theorem check on a finished run, with `ε_model` searched for and the
/// per-round optimal policies as the comparison sequence.
pub fn theorem_report_for_run(run: &TabularRun, search_steps: usize, search_lr: f64) -> Result<TheoremReport> {
    let comparison: Vec<Policy> = run.diagnostics.iter().map(|d| d.optimal.clone()).collect();
    let mut report = theorem_bound_check(&run.diagnostics, &comparison)?;
    let eps_model = best_in_class_kl(run, search_steps, search_lr)?;
    let terms = all_terms(&run.diagnostics, &comparison)?;
    let c_max = terms.iter().map(|r| r.coverage_cmp).fold(0.0, f64::max);
    let eps_oc = terms.iter().map(|r| r.eps_oc).fold(0.0, f64::max);
    let h = terms[0].horizon;
    report.eps_model = Some(eps_model);
    report.asymptote = Some(eps_oc + c_max * h * h * eps_model.sqrt());
    Ok(report)
}

/// `min_P max_t E_{ρ_t} KL(P^{(t)} ‖ U(P, τ_t))` over the run's model family,
/// searched by gradient descent on the round-averaged objective from the
/// warm start and from the run's final meta model; the value at the best
/// iterate visited is returned.
pub fn best_in_class_kl(run: &TabularRun, steps: usize, lr: f64) -> Result<f64> {
    if run.records.is_empty() {
        return Err(Error::Empty("run records"));
    }
    let alpha = run.config.hyper.alpha_adapt;
    let rounds: Vec<(&TabularDiagnostics, &[Step], Vec<f64>)> = run
        .diagnostics
        .iter()
        .zip(&run.records)
        .map(|(d, r)| {
            let rho = d.d_policy.iter().zip(&d.nu).map(|(p, n)| 0.5 * (p + n)).collect();
            (d, r.tau.steps.as_slice(), rho)
        })
        .collect();
    let adapted = |m: &LogitModel, tau: &[Step]| -> Result<LogitModel> {
        if run.config.variant.adapts() {
            m.adapt(tau, alpha)
        } else {
            Ok(m.clone())
        }
    };
    let worst = |m: &LogitModel| -> Result<f64> {
        let mut worst = 0.0f64;
        for (d, tau, rho) in &rounds {
            worst = worst.max(kl_model_error(&adapted(m, tau)?.kernel()?, &d.mdp, rho)?);
        }
        Ok(worst)
    };
    let starts = [run.warm.clone(), run.snapshots.last().cloned().unwrap_or_else(|| run.warm.clone())];
    let mut best = f64::INFINITY;
    for start in starts {
        let mut m = start;
        best = best.min(worst(&m)?);
        for _ in 0..steps {
            let mut total = vec![0.0; m.logits.len()];
            for (d, tau, rho) in &rounds {
                let post = adapted(&m, tau)?;
                let mut g = post.expected_grad(d.mdp.kernel(), rho)?;
                if run.config.variant.adapts() && alpha != 0.0 {
                    let hv = m.hessian_vec(tau, &g)?;
                    g.iter_mut().zip(&hv).for_each(|(g, h)| *g -= alpha * h);
                }
                total.iter_mut().zip(&g).for_each(|(t, g)| *t += g / rounds.len() as f64);
            }
            m.logits.iter_mut().zip(&total).for_each(|(l, g)| *l -= lr * g);
            best = best.min(worst(&m)?);
        }
    }
    Ok(best)
}

/// A stream of strongly convex losses `ℓ_t(w) = ½‖w − c_t‖²`. Centers take a
/// random walk of step `drift` projected onto the ball of radius `radius`;
/// the adaptation sample of round `t` is `z_t = c_t + noise·N(0, I)` and
/// `U(w, z) = w − α(w − z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyStream {
    pub dim: usize,
    pub alpha: f64,
    pub drift: f64,
    pub noise: f64,
    pub radius: f64,
}

impl Default for ToyStream {
    fn default() -> Self {
        Self { dim: 3, alpha: 0.1, drift: 0.3, noise: 0.5, radius: 1.0 }
    }
}

impl ToyStream {
    /// Identical centers and exact adaptation samples.
    pub fn stationary(dim: usize) -> Self {
        Self { dim, drift: 0.0, noise: 0.0, ..Self::default() }
    }

    fn adapt(&self, w: &[f64], z: &[f64]) -> Vec<f64> {
        w.iter().zip(z).map(|(w, z)| w - self.alpha * (w - z)).collect()
    }

    fn loss(&self, w: &[f64], z: &[f64], c: &[f64]) -> f64 {
        0.5 * self.adapt(w, z).iter().zip(c).map(|(u, c)| (u - c).powi(2)).sum::<f64>()
    }

    /// The point where `ℓ_t(U(·, z_t))` is minimal: `(c − α z)/(1 − α)`.
    fn post_adapt_target(&self, z: &[f64], c: &[f64]) -> Vec<f64> {
        c.iter().zip(z).map(|(c, z)| (c - self.alpha * z) / (1.0 - self.alpha)).collect()
    }

    fn draw(&self, rounds: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let mut c: Vec<f64> = normal(self.dim);
        let project = |c: &mut Vec<f64>, r: f64| {
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > r {
                c.iter_mut().for_each(|x| *x *= r / norm);
            }
        };
        project(&mut c, self.radius);
        let mut out = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let z = c.iter().zip(normal(self.dim)).map(|(c, e)| c + self.noise * e).collect();
            out.push((c.clone(), z));
            let step = normal(self.dim);
            c.iter_mut().zip(step).for_each(|(c, e)| *c += self.drift * e);
            project(&mut c, self.radius);
        }
        out
    }
}

/// Regret `R(t) = Σ_{s≤t} ℓ_s(U(w_s, z_s)) − min_w Σ_{s≤t} ℓ_s(U(w, z_s))` of
/// follow-the-meta-leader from `w_1 = 0`, for every prefix `t ≤ rounds`.
/// Each leader and comparator is the exact argmin, evaluated by summing the
/// losses it incurs.
pub fn ftml_toy_regret(stream: &ToyStream, rounds: usize, seed: u64) -> Result<Vec<f64>> {
    if stream.dim == 0 {
        return Err(Error::Empty("toy stream dimension"));
    }
    if !(0.0..1.0).contains(&stream.alpha) {
        return Err(Error::config("alpha", "adaptation step must lie in [0, 1)"));
    }
    let data = stream.draw(rounds, seed);
    let targets: Vec<Vec<f64>> = data.iter().map(|(c, z)| stream.post_adapt_target(z, c)).collect();
    let mut sum = vec![0.0; stream.dim];
    let mut incurred = 0.0;
    let mut regret = Vec::with_capacity(rounds);
    for t in 0..rounds {
        let leader: Vec<f64> = if t == 0 { vec![0.0; stream.dim] } else { sum.iter().map(|s| s / t as f64).collect() };
        let (c, z) = &data[t];
        incurred += stream.loss(&leader, z, c);
        sum.iter_mut().zip(&targets[t]).for_each(|(s, x)| *s += x);
        let best: Vec<f64> = sum.iter().map(|s| s / (t + 1) as f64).collect();
        let comparator: f64 = data[..=t].iter().map(|(c, z)| stream.loss(&best, z, c)).sum();
        regret.push(incurred - comparator);
    }
    Ok(regret)
}

/// `R(T)` at `T = 2^k` for `T` in `[from, to]`.
pub fn doubling_points(regret: &[f64], from: usize, to: usize) -> Vec<(usize, f64)> {
    std::iter::successors(Some(from.max(1)), |t| Some(t * 2))
        .take_while(|t| *t <= to && *t <= regret.len())
        .map(|t| (t, regret[t - 1]))
        .collect()
}

/// Fits of `R(T)` against `log T` and against `T` at the given points.
pub fn regret_shape(points: &[(usize, f64)]) -> Result<(LineFit, LineFit)> {
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let logs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let lins: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    Ok((fit_line(&logs, &ys)?, fit_line(&lins, &ys)?))
}

