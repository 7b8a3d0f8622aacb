use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pipa::engine::{parse_assignments, parse_override, TrainConfig, TRAIN_KEYS};

/// Keys that configure a run but not the training math.
pub const RUN_KEYS: &[&str] = &[
    "data_dir",
    "out_dir",
    "checkpoint",
    "log_interval",
    "eval_interval",
    "checkpoint_interval",
];

/// Marks failures caused by bad flags or config, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Final checkpoint; empty means `<out_dir>/checkpoint.bin`.
    pub checkpoint: PathBuf,
    pub log_interval: u64,
    /// Zero evaluates only at the end.
    pub eval_interval: u64,
    /// Zero writes only the final checkpoint.
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            checkpoint: PathBuf::new(),
            log_interval: 10,
            eval_interval: 0,
            checkpoint_interval: 0,
        }
    }
}

fn number(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| usage(format!("{key}: {v:?} is not a nonnegative integer")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "checkpoint" => self.checkpoint = value.into(),
            "log_interval" => self.log_interval = number(key, value)?,
            "eval_interval" => self.eval_interval = number(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = number(key, value)?,
            _ if TRAIN_KEYS.contains(&key) => self.train.set(key, value).map_err(|e| usage(e.to_string()))?,
            _ => bail!(UsageError(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults, then the config file, then `--set` overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(|e| usage(format!("{e:#}")))?;
            for (k, v) in parse_assignments(&text).map_err(|e| usage(e.to_string()))? {
                cfg.set(&k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = parse_override(o).map_err(|e| usage(e.to_string()))?;
            cfg.set(&k, &v)?;
        }
        cfg.train.validate().map_err(|e| usage(e.to_string()))?;
        if cfg.log_interval == 0 {
            bail!(UsageError("log_interval must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.as_os_str().is_empty() {
            self.out_dir.join("checkpoint.bin")
        } else {
            self.checkpoint.clone()
        }
    }

    /// Every key with its resolved value; feeding this back reproduces the run.
    pub fn to_text(&self) -> String {
        let mut s = self.train.to_text();
        for k in RUN_KEYS {
            let v = match *k {
                "data_dir" => self.data_dir.display().to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                "checkpoint" => self.checkpoint_path().display().to_string(),
                "log_interval" => self.log_interval.to_string(),
                "eval_interval" => self.eval_interval.to_string(),
                _ => self.checkpoint_interval.to_string(),
            };
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
