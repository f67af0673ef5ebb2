//! `verify`: the analysis checks as a structured-text report.

use std::fmt::Write as _;
use std::io::Cursor;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ommbrl::checks;
use ommbrl::config::{EnvStream, StreamConfig};
use ommbrl::drivesim::{instruction_gate, model_arch, BaseInstruction, Instruction};
use ommbrl::dynmodel::{load_checkpoint, save_checkpoint, CheckpointInfo, ModelParams};
use ommbrl::online::tabular::{tabular_warm_start, LogitModel};

pub const SLACK_TOL: f64 = -1e-9;
pub const LEMMA_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub sections: Vec<Section>,
}

impl Report {
    pub fn failed(&self) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(|s| !s.pass)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            let _ = writeln!(out, "[{}]\nstatus = {}\nseconds = {:.2}", s.name, if s.pass { "pass" } else { "FAIL" }, s.seconds);
            for line in s.detail.lines() {
                let _ = writeln!(out, "{line}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "[overall]\nstatus = {}", if self.failed().next().is_none() { "pass" } else { "FAIL" });
        out
    }
}

/// Worker cap from `OMMBRL_THREADS`, else the machine's parallelism.
pub fn thread_cap() -> usize {
    std::env::var("OMMBRL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

type Outcome = Result<(bool, String), ommbrl::Error>;
type Check = (&'static str, Box<dyn Fn(&StreamConfig) -> Outcome + Send + Sync>);

fn check(name: &'static str, f: impl Fn(&StreamConfig) -> Outcome + Send + Sync + 'static) -> Check {
    (name, Box::new(f))
}

fn common_checks() -> Vec<Check> {
    vec![
        check("simulation_lemma", |cfg| {
            let err = checks::simulation_lemma_max_error(200, cfg.seed)?;
            Ok((err <= LEMMA_TOL, format!("triples = 200\nmax_abs_error = {err:e}\ntolerance = {LEMMA_TOL:e}")))
        }),
        check("gradient_oracle", |cfg| {
            let g = checks::gradient_oracle(50, cfg.seed)?;
            let pass = g.worst() <= GRAD_TOL && g.max_params <= 50;
            Ok((
                pass,
                format!(
                    "cases = 50\nmax_params = {}\nloss_error = {:e}\nfirst_order_error = {:e}\nsecond_order_error = {:e}\ntolerance = {GRAD_TOL:e}",
                    g.max_params, g.loss, g.first_order, g.second_order
                ),
            ))
        }),
        check("ftml_regret_shape", |cfg| {
            let s = checks::ftml_regret_shape(32, 1024, cfg.seed)?;
            let pass = s.log_rss < s.linear_rss && s.increments_nonincreasing(1e-9);
            Ok((pass, format!("log_rss = {:e}\nlinear_rss = {:e}\nstationary_increments = {:?}", s.log_rss, s.linear_rss, s.stationary_increments)))
        }),
        check("instruction_gate", |_| {
            let turn = Instruction::normal(BaseInstruction::TurnLeft);
            let cases = [
                (instruction_gate(turn, Instruction::NONE, 3, 15), (true, 0)),
                (instruction_gate(turn, turn, 14, 15), (false, 15)),
                (instruction_gate(turn, turn, 15, 15), (true, 0)),
            ];
            let pass = cases.iter().all(|(got, want)| got == want);
            Ok((pass, format!("cases = {}", cases.len())))
        }),
        check("config_round_trip", |cfg| {
            let back = StreamConfig::from_text(&cfg.to_text())?;
            Ok((back == *cfg && back.to_text() == cfg.to_text(), String::new()))
        }),
        check("replay_determinism", |cfg| {
            // Two rounds are enough to exercise every stage of the loop.
            let short = StreamConfig { rounds: cfg.rounds.min(2), ..cfg.clone() };
            let same = checks::metrics_bytes(&short)? == checks::metrics_bytes(&short)?;
            Ok((same, format!("rounds = {}", short.rounds)))
        }),
        check("checkpoint_round_trip", |cfg| {
            let same = match cfg.env {
                EnvStream::Drive(_) => {
                    let arch = model_arch(cfg.variant == ommbrl::config::Variant::AdaptSpeed, cfg.hyper.history, cfg.hyper.hidden.clone());
                    let model = ModelParams::<f64>::init(arch, cfg.seed)?;
                    let mut bytes = Vec::new();
                    save_checkpoint(&mut bytes, &model, &CheckpointInfo { rollout_len: cfg.hyper.rollout_len, seed: cfg.seed })?;
                    let (back, _) = load_checkpoint(Cursor::new(bytes))?;
                    back.theta.iter().map(|x| x.to_bits()).eq(model.theta.iter().map(|x| x.to_bits())) && back.arch == model.arch
                }
                EnvStream::Tabular(_) => {
                    let model = tabular_warm_start(cfg)?;
                    LogitModel::from_text(&model.to_text())? == model
                }
            };
            Ok((same, String::new()))
        }),
    ]
}

fn tabular_checks() -> Vec<Check> {
    vec![
        check("pinsker_jensen_chain", |cfg| {
            let slack = checks::chain_min_slack(cfg)?;
            Ok((slack >= SLACK_TOL, format!("min_slack = {slack:e}")))
        }),
        check("performance_bound", |cfg| {
            let slack = checks::perf_bound_min_slack(cfg, cfg.seed..cfg.seed + 5)?;
            Ok((slack >= SLACK_TOL, format!("seeds = 5\nmin_slack = {slack:e}")))
        }),
        check("regret_closure", |cfg| {
            let means = checks::hindsight_prefix_means(cfg)?;
            let (early, last) = (means.get(4).copied().unwrap_or(f64::NAN), means.last().copied().unwrap_or(f64::NAN));
            Ok((last <= 0.5 * early, format!("prefix_gap_round_5 = {early:e}\nprefix_gap_round_{} = {last:e}", means.len())))
        }),
    ]
}

/// Runs the checks that apply to `cfg`, at most `threads` at a time.
/// Sections come back in a fixed order whatever the scheduling.
pub fn run_checks(cfg: &StreamConfig, threads: usize) -> Report {
    let mut list = common_checks();
    if let EnvStream::Tabular(_) = cfg.env {
        list.extend(tabular_checks());
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Section>>> = Mutex::new(vec![None; list.len()]);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, list.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((name, f)) = list.get(i) else { break };
                let started = Instant::now();
                let (pass, detail) = match f(cfg) {
                    Ok(r) => r,
                    Err(e) => (false, format!("error = {e}")),
                };
                let section = Section { name, pass, detail, seconds: started.elapsed().as_secs_f64() };
                results.lock().expect("no worker panics while holding the lock")[i] = Some(section);
            });
        }
    });
    Report { sections: results.into_inner().expect("workers joined").into_iter().flatten().collect() }
}
