//! The `ommbrl` command: experiment orchestration around the core library.
//!
//! Every command that writes a run directory leaves it self-describing:
//! `config.txt`, `manifest.txt`, metrics and checkpoints side by side.

pub mod manifest;
pub mod plot;
pub mod verify;

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ommbrl::config::{EnvStream, StreamConfig};
use ommbrl::dynmodel::{load_checkpoint, save_checkpoint, CheckpointInfo, ModelParams};
use ommbrl::online::{drive, run_stream, snapshot_id, tabular, write_metrics_csv, StreamRun};
use ommbrl_service::{ServeOptions, Server};
use thiserror::Error;

use manifest::{RunManifest, CONFIG_FILE, METRICS_FILE, REGRET_FILE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Core(#[from] ommbrl::Error),
    #[error(transparent)]
    Service(#[from] ommbrl_service::ServiceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 for anything the user can fix in the invocation or config, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(ommbrl::Error::Config { .. }) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ommbrl", version, about = "Online meta model-based RL: training, streams, checks and plots")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the warm-start model on offline explore data.
    OfflineTrain(RunArgs),
    /// Run the online loop and write metrics and per-round checkpoints.
    RunStream(RunArgs),
    /// Run the analysis checks and print a report.
    Verify(RunArgs),
    /// Replay a run, check it reproduces, and add hindsight regret gaps.
    Regret {
        run_dir: PathBuf,
    },
    /// Draw SVG charts from one or more run directories.
    Plot {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Where the SVG files go; defaults to the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve driving sessions over websockets.
    Serve(ServeArgs),
}

/// Config file plus command-line overrides.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long, value_parser = ["first", "second"])]
    pub order: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    /// Wall-clock speed-up of the 1 s tick.
    #[arg(long, conflicts_with = "lockstep")]
    pub realtime_divisor: Option<f64>,
    /// Close each tick when its input arrives instead of on a timer.
    #[arg(long)]
    pub lockstep: bool,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Warm-start checkpoint from `offline-train`; trained on the spot when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<StreamConfig> {
        let text = fs::read_to_string(&self.config).map_err(|e| CliError::Usage(format!("{}: {e}", self.config.display())))?;
        let mut cfg = StreamConfig::from_text(&text)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.parse()?;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        if let Some(o) = &self.order {
            cfg.set("hyper.order", o)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::OfflineTrain(args) => offline_train(&args.config.load()?, &out_dir(&args.out, "offline")?).map(drop),
        Command::RunStream(args) => run_stream_cmd(&args.config.load()?, &out_dir(&args.out, "run")?).map(drop),
        Command::Verify(args) => {
            let cfg = args.config.load()?;
            let report = verify::run_checks(&cfg, verify::thread_cap());
            let text = report.to_text();
            print!("{text}");
            if let Some(dir) = &args.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("verify.txt"), &text)?;
            }
            match report.failed().count() {
                0 => Ok(()),
                n => Err(CliError::Check(format!("{n} of {} checks failed", report.sections.len()))),
            }
        }
        Command::Regret { run_dir } => regret(&run_dir),
        Command::Plot { run_dirs, out } => {
            let out = out.unwrap_or_else(|| run_dirs[0].clone());
            fs::create_dir_all(&out)?;
            for path in plot::plot_runs(&run_dirs, &out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Serve(args) => serve(&args),
    }
}

fn out_dir(out: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn save_model(path: &Path, cfg: &StreamConfig, params: &ModelParams<f64>) -> Result<()> {
    let info = CheckpointInfo { rollout_len: cfg.hyper.rollout_len, seed: cfg.seed };
    save_checkpoint(BufWriter::new(fs::File::create(path)?), params, &info)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams<f64>> {
    Ok(load_checkpoint(BufReader::new(fs::File::open(path)?))?.0)
}

/// Writes the warm-start model; returns its path.
pub fn offline_train(cfg: &StreamConfig, dir: &Path) -> Result<PathBuf> {
    let mut manifest = RunManifest::new("offline-train", cfg);
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    let path = match cfg.env {
        EnvStream::Drive(_) => {
            let path = dir.join("warm.ckpt");
            save_model(&path, cfg, &drive::warm_start(cfg)?)?;
            path
        }
        EnvStream::Tabular(_) => {
            let path = dir.join("warm.table");
            fs::write(&path, tabular::tabular_warm_start(cfg)?.to_text())?;
            path
        }
    };
    manifest.add("config", CONFIG_FILE);
    manifest.add("checkpoint", file_name(&path));
    manifest.write(dir)?;
    Ok(path)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn metrics_csv(run: &StreamRun, gaps: Option<&[f64]>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_metrics_csv(&mut out, &run.metrics(gaps))?;
    Ok(out)
}

/// Runs the stream into `dir` and returns the run.
pub fn run_stream_cmd(cfg: &StreamConfig, dir: &Path) -> Result<StreamRun> {
    let mut manifest = RunManifest::new("run-stream", cfg);
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    manifest.add("config", CONFIG_FILE);
    let run = run_stream(cfg)?;
    fs::write(dir.join(METRICS_FILE), metrics_csv(&run, None)?)?;
    manifest.add("metrics", METRICS_FILE);
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt)?;
    // Snapshot of round t is the meta model after that round's update.
    let names: Vec<String> = match &run {
        StreamRun::Drive(r) => r
            .snapshots
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let name = format!("{}.ckpt", snapshot_id(i + 1));
                save_model(&ckpt.join(&name), cfg, m).map(|_| name)
            })
            .collect::<Result<_>>()?,
        StreamRun::Tabular(r) => r
            .snapshots
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let name = format!("{}.table", snapshot_id(i + 1));
                fs::write(ckpt.join(&name), m.to_text()).map(|_| name)
            })
            .collect::<std::io::Result<_>>()?,
    };
    for name in names {
        manifest.add("checkpoint", format!("checkpoints/{name}"));
    }
    manifest.write(dir)?;
    Ok(run)
}

/// Replays the run in `dir`, refuses to go on unless its metrics reproduce,
/// then writes the metrics with the regret column filled.
pub fn regret(dir: &Path) -> Result<()> {
    let text = fs::read_to_string(dir.join(manifest::MANIFEST_FILE))
        .map_err(|e| CliError::Usage(format!("{}: not a run directory ({e})", dir.display())))?;
    let mut manifest = RunManifest::from_text(&text)?;
    let cfg = manifest.config.clone();
    let run = run_stream(&cfg)?;
    let recorded = fs::read(dir.join(METRICS_FILE))?;
    if metrics_csv(&run, None)? != recorded {
        return Err(CliError::Check("replayed metrics differ from metrics.csv".into()));
    }
    let gaps = match &run {
        StreamRun::Drive(r) => drive::hindsight_regret(r)?,
        StreamRun::Tabular(r) => tabular::hindsight_regret(r)?,
    };
    fs::write(dir.join(REGRET_FILE), metrics_csv(&run, Some(&gaps))?)?;
    if !manifest.artifacts.iter().any(|(k, _)| k == "regret") {
        manifest.add("regret", REGRET_FILE);
    }
    manifest.write(dir)
}

fn serve(args: &ServeArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let warm = match &args.model {
        Some(path) => load_model(path)?,
        None => drive::warm_start(&cfg)?,
    };
    let opts = ServeOptions {
        realtime_divisor: if args.lockstep { None } else { Some(args.realtime_divisor.unwrap_or(1.0)) },
        checkpoint_dir: args.checkpoint_dir.clone(),
    };
    let server = Server::bind(("0.0.0.0", args.port), cfg, warm, opts)?;
    eprintln!("listening on {}", server.local_addr()?);
    server.run(Arc::new(AtomicBool::new(false)))?;
    Ok(())
}
