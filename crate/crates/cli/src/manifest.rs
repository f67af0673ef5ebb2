//! Run manifests: what a run directory holds and which configuration made it.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ommbrl::config::StreamConfig;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REGRET_FILE: &str = "regret.csv";

/// Content hash of the canonical config text, framed like a git blob
/// (`blob <len>\0<text>`) but with SHA-256.
pub fn config_hash(cfg: &StreamConfig) -> String {
    let text = cfg.to_text();
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    format!("{:x}", h.finalize())
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: StreamConfig,
    pub started: f64,
    pub finished: f64,
    /// `(kind, path relative to the run directory)`.
    pub artifacts: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, config: &StreamConfig) -> Self {
        Self { command: command.into(), config: config.clone(), started: unix_now(), finished: f64::NAN, artifacts: Vec::new() }
    }

    pub fn add(&mut self, kind: &str, path: impl Into<String>) {
        self.artifacts.push((kind.into(), path.into()));
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "command = {}\nconfig_hash = {}\nseed = {}\nstarted_unix = {:.3}\nfinished_unix = {:.3}\n",
            self.command,
            config_hash(&self.config),
            self.config.seed,
            self.started,
            self.finished
        );
        for (kind, path) in &self.artifacts {
            out.push_str(&format!("artifact.{kind} = {path}\n"));
        }
        out.push_str("\n[config]\n");
        out.push_str(&self.config.to_text());
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let (head, config) = text.split_once("\n[config]\n").ok_or_else(|| CliError::Manifest("missing [config] section".into()))?;
        let config = StreamConfig::from_text(config)?;
        let mut m = RunManifest { command: String::new(), config, started: f64::NAN, finished: f64::NAN, artifacts: Vec::new() };
        let mut hash = None;
        for line in head.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(" = ").ok_or_else(|| CliError::Manifest(format!("bad line `{line}`")))?;
            let time = |v: &str| v.parse::<f64>().map_err(|e| CliError::Manifest(format!("{k}: {e}")));
            match k {
                "command" => m.command = v.into(),
                "config_hash" => hash = Some(v.to_string()),
                "seed" => {}
                "started_unix" => m.started = time(v)?,
                "finished_unix" => m.finished = time(v)?,
                _ => match k.strip_prefix("artifact.") {
                    Some(kind) => m.artifacts.push((kind.into(), v.into())),
                    None => return Err(CliError::Manifest(format!("unknown key `{k}`"))),
                },
            }
        }
        if hash.as_deref() != Some(config_hash(&m.config).as_str()) {
            return Err(CliError::Manifest("config hash does not match the config section".into()));
        }
        Ok(m)
    }

    pub fn write(&mut self, dir: &Path) -> Result<(), CliError> {
        self.finished = unix_now();
        fs::write(dir.join(MANIFEST_FILE), self.to_text())?;
        Ok(())
    }
}
