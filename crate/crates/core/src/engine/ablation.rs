//! Toggle-grid sweeps over seeds.

use std::fmt::Write;

use super::config::TrainConfig;
use super::eval::{evaluate, EvalReport};
use super::train::{train_until, TrainData, TrainState};
use crate::data::{gen_static_dataset, gen_video_dataset, Dataset, SceneConfig};
use crate::error::Result;
use crate::losses::Scenario;

/// A named set of config overrides applied on top of a base config.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Arm {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Arm {
            name: name.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Baseline, each multi-grained term alone, and both together.
pub fn static_arms() -> Vec<Arm> {
    vec![
        Arm::new("baseline", &[("use_pixel", "false"), ("use_patch", "false")]),
        Arm::new("+pixel", &[("use_pixel", "true"), ("use_patch", "false")]),
        Arm::new("+patch", &[("use_pixel", "false"), ("use_patch", "true")]),
        Arm::new("+pixel+patch", &[("use_pixel", "true"), ("use_patch", "true")]),
    ]
}

/// Video baseline, pixel+patch, pixel+patch+temporal with short and long
/// reference ranges.
pub fn video_arms() -> Vec<Arm> {
    let off = [("use_pixel", "false"), ("use_patch", "false"), ("use_temporal", "false")];
    let pipa = [("use_pixel", "true"), ("use_patch", "true"), ("use_temporal", "false")];
    let plus = |lo: &'static str, hi: &'static str| {
        [
            ("use_pixel", "true"),
            ("use_patch", "true"),
            ("use_temporal", "true"),
            ("temporal_min", lo),
            ("temporal_max", hi),
        ]
    };
    vec![
        Arm::new("baseline", &off),
        Arm::new("pixel+patch", &pipa),
        Arm::new("+temporal[1,3]", &plus("1", "3")),
        Arm::new("+temporal[4,16]", &plus("4", "16")),
    ]
}

pub fn arms_for(scenario: Scenario) -> Vec<Arm> {
    match scenario {
        Scenario::Static => static_arms(),
        Scenario::Video => video_arms(),
    }
}

/// Sizes of the synthetic benchmark generated per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkData {
    pub scene: SceneConfig,
    pub n_source: usize,
    pub n_target: usize,
    pub n_eval: usize,
    /// Clips per split for video.
    pub n_clips: usize,
    pub clip_len: usize,
}

impl Default for BenchmarkData {
    fn default() -> Self {
        BenchmarkData {
            scene: SceneConfig::default(),
            n_source: 200,
            n_target: 200,
            n_eval: 100,
            n_clips: 12,
            clip_len: 20,
        }
    }
}

impl BenchmarkData {
    pub fn generate(&self, scenario: Scenario, seed: u64) -> Result<Dataset> {
        match scenario {
            Scenario::Static => gen_static_dataset(&self.scene, self.n_source, self.n_target, self.n_eval, seed),
            Scenario::Video => gen_video_dataset(&self.scene, self.n_clips, self.clip_len, seed),
        }
    }
}

/// Trains from scratch to `cfg.total_iters` and scores the target eval split.
pub fn run_arm(cfg: &TrainConfig, ds: &Dataset) -> Result<EvalReport> {
    let data = TrainData::new(ds, cfg.scenario)?;
    let mut state = TrainState::new(cfg.clone())?;
    train_until(&mut state, &data, cfg.total_iters, |_, _, _| Ok(()))?;
    evaluate(state.eval_params(), &ds.target_eval(), cfg.num_classes, state.iter)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub arms: Vec<String>,
    pub seeds: Vec<u64>,
    /// `miou[arm][seed]`.
    pub miou: Vec<Vec<f64>>,
}

impl AblationTable {
    pub fn mean(&self, arm: usize) -> f64 {
        let row = &self.miou[arm];
        row.iter().sum::<f64>() / row.len() as f64
    }

    pub fn mean_of(&self, name: &str) -> Option<f64> {
        self.arms.iter().position(|a| a == name).map(|i| self.mean(i))
    }

    /// One row per arm, one mIoU column per seed plus the mean, in percent.
    pub fn to_table(&self) -> String {
        let width = self.arms.iter().map(String::len).max().unwrap_or(3).max(3);
        let mut s = format!("{:<width$}", "arm");
        for seed in &self.seeds {
            write!(s, " {:>8}", format!("seed{seed}")).unwrap();
        }
        s.push_str("     mean\n");
        for (i, arm) in self.arms.iter().enumerate() {
            write!(s, "{arm:<width$}").unwrap();
            for v in &self.miou[i] {
                write!(s, " {:>8.2}", 100.0 * v).unwrap();
            }
            writeln!(s, " {:>8.2}", 100.0 * self.mean(i)).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,seed,miou\n");
        for (i, arm) in self.arms.iter().enumerate() {
            for (seed, v) in self.seeds.iter().zip(&self.miou[i]) {
                writeln!(s, "{arm},{seed},{v}").unwrap();
            }
        }
        s
    }
}

/// Runs every arm for every seed. `dataset(seed)` supplies the data of a
/// seed; `progress(arm, seed, report)` fires after each run.
pub fn run_ablation(
    base: &TrainConfig,
    arms: &[Arm],
    seeds: &[u64],
    mut dataset: impl FnMut(u64) -> Result<Dataset>,
    mut progress: impl FnMut(&str, u64, &EvalReport),
) -> Result<AblationTable> {
    let mut miou = vec![Vec::with_capacity(seeds.len()); arms.len()];
    for &seed in seeds {
        let ds = dataset(seed)?;
        for (i, arm) in arms.iter().enumerate() {
            let mut cfg = arm.apply(base)?;
            cfg.seed = seed;
            let report = run_arm(&cfg, &ds)?;
            progress(&arm.name, seed, &report);
            miou[i].push(report.miou);
        }
    }
    Ok(AblationTable {
        arms: arms.iter().map(|a| a.name.clone()).collect(),
        seeds: seeds.to_vec(),
        miou,
    })
}
