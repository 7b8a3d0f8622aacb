//! Training hyperparameters and their flat `key = value` text form.

use std::fmt::Display;
use std::str::FromStr;

use crate::bank::TemporalRange;
use crate::error::{Error, Result};
use crate::geom::PatchSampler;
use crate::losses::{ContrastConfig, LossWeights, Scenario};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    pub decay_power: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub threshold: f64,
    pub ema_m: f64,
    pub tau: f64,
    pub max_anchors_per_class: usize,
    pub negatives_per_anchor: usize,
    pub bank_per_class: usize,
    pub bank_capacity: usize,
    pub normalize_by_pairs: bool,
    pub crop: usize,
    pub patch_crop: usize,
    pub iou_lo: f64,
    pub iou_hi: f64,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub temporal_min: usize,
    pub temporal_max: usize,
    pub use_ce_target: bool,
    pub use_pixel: bool,
    pub use_patch: bool,
    pub use_temporal: bool,
    /// Adds confidently pseudo-labeled mixed-image cells to the pixel anchors.
    pub pixel_target_anchors: bool,
    pub photometric: bool,
    pub eval_teacher: bool,
    pub num_classes: usize,
    pub stage_channels: [usize; 3],
    pub feat_dim: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scenario: Scenario::Static,
            seed: 0,
            lr: 6e-5,
            warmup_iters: 150,
            total_iters: 2000,
            decay_power: 1.0,
            weight_decay: 0.01,
            grad_clip: 0.0,
            batch_size: 2,
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
            threshold: 0.968,
            ema_m: 0.999,
            tau: 0.1,
            max_anchors_per_class: 64,
            negatives_per_anchor: 256,
            bank_per_class: 64,
            bank_capacity: 256,
            normalize_by_pairs: true,
            crop: 32,
            patch_crop: 48,
            iou_lo: 0.1,
            iou_hi: 1.0,
            ratio_lo: 0.5,
            ratio_hi: 2.0,
            temporal_min: 1,
            temporal_max: 3,
            use_ce_target: true,
            use_pixel: true,
            use_patch: true,
            use_temporal: true,
            pixel_target_anchors: false,
            photometric: true,
            eval_teacher: false,
            num_classes: 5,
            stage_channels: [32, 64, 64],
            feat_dim: 64,
            embed_dim: 32,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

/// Every key, in echo order.
pub const TRAIN_KEYS: &[&str] = &[
    "scenario",
    "seed",
    "lr",
    "warmup_iters",
    "total_iters",
    "decay_power",
    "weight_decay",
    "grad_clip",
    "batch_size",
    "alpha",
    "beta",
    "gamma",
    "threshold",
    "ema_m",
    "tau",
    "max_anchors_per_class",
    "negatives_per_anchor",
    "bank_per_class",
    "bank_capacity",
    "normalize_by_pairs",
    "crop",
    "patch_crop",
    "iou_lo",
    "iou_hi",
    "ratio_lo",
    "ratio_hi",
    "temporal_min",
    "temporal_max",
    "use_ce_target",
    "use_pixel",
    "use_patch",
    "use_temporal",
    "pixel_target_anchors",
    "photometric",
    "eval_teacher",
    "num_classes",
    "stage_channels",
    "feat_dim",
    "embed_dim",
];

impl TrainConfig {
    /// Assigns one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "scenario" => {
                self.scenario = match v {
                    "static" => Scenario::Static,
                    "video" => Scenario::Video,
                    _ => return Err(Error::Config(format!("scenario: unknown value {v:?}"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup_iters" => self.warmup_iters = parse(key, v)?,
            "total_iters" => self.total_iters = parse(key, v)?,
            "decay_power" => self.decay_power = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "threshold" => self.threshold = parse(key, v)?,
            "ema_m" => self.ema_m = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "max_anchors_per_class" => self.max_anchors_per_class = parse(key, v)?,
            "negatives_per_anchor" => self.negatives_per_anchor = parse(key, v)?,
            "bank_per_class" => self.bank_per_class = parse(key, v)?,
            "bank_capacity" => self.bank_capacity = parse(key, v)?,
            "normalize_by_pairs" => self.normalize_by_pairs = parse_bool(key, v)?,
            "crop" => self.crop = parse(key, v)?,
            "patch_crop" => self.patch_crop = parse(key, v)?,
            "iou_lo" => self.iou_lo = parse(key, v)?,
            "iou_hi" => self.iou_hi = parse(key, v)?,
            "ratio_lo" => self.ratio_lo = parse(key, v)?,
            "ratio_hi" => self.ratio_hi = parse(key, v)?,
            "temporal_min" => self.temporal_min = parse(key, v)?,
            "temporal_max" => self.temporal_max = parse(key, v)?,
            "use_ce_target" => self.use_ce_target = parse_bool(key, v)?,
            "use_pixel" => self.use_pixel = parse_bool(key, v)?,
            "use_patch" => self.use_patch = parse_bool(key, v)?,
            "use_temporal" => self.use_temporal = parse_bool(key, v)?,
            "pixel_target_anchors" => self.pixel_target_anchors = parse_bool(key, v)?,
            "photometric" => self.photometric = parse_bool(key, v)?,
            "eval_teacher" => self.eval_teacher = parse_bool(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "stage_channels" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.stage_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config("stage_channels: expected three values".into()))?;
            }
            "feat_dim" => self.feat_dim = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Text form of one key; `None` for unknown keys.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "scenario" => self.scenario.as_str().to_string(),
            "seed" => self.seed.to_string(),
            "lr" => self.lr.to_string(),
            "warmup_iters" => self.warmup_iters.to_string(),
            "total_iters" => self.total_iters.to_string(),
            "decay_power" => self.decay_power.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "gamma" => self.gamma.to_string(),
            "threshold" => self.threshold.to_string(),
            "ema_m" => self.ema_m.to_string(),
            "tau" => self.tau.to_string(),
            "max_anchors_per_class" => self.max_anchors_per_class.to_string(),
            "negatives_per_anchor" => self.negatives_per_anchor.to_string(),
            "bank_per_class" => self.bank_per_class.to_string(),
            "bank_capacity" => self.bank_capacity.to_string(),
            "normalize_by_pairs" => self.normalize_by_pairs.to_string(),
            "crop" => self.crop.to_string(),
            "patch_crop" => self.patch_crop.to_string(),
            "iou_lo" => self.iou_lo.to_string(),
            "iou_hi" => self.iou_hi.to_string(),
            "ratio_lo" => self.ratio_lo.to_string(),
            "ratio_hi" => self.ratio_hi.to_string(),
            "temporal_min" => self.temporal_min.to_string(),
            "temporal_max" => self.temporal_max.to_string(),
            "use_ce_target" => self.use_ce_target.to_string(),
            "use_pixel" => self.use_pixel.to_string(),
            "use_patch" => self.use_patch.to_string(),
            "use_temporal" => self.use_temporal.to_string(),
            "pixel_target_anchors" => self.pixel_target_anchors.to_string(),
            "photometric" => self.photometric.to_string(),
            "eval_teacher" => self.eval_teacher.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "stage_channels" => {
                let [a, b, c] = self.stage_channels;
                format!("{a},{b},{c}")
            }
            "feat_dim" => self.feat_dim.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            _ => return None,
        })
    }

    /// `key = value` lines for every key.
    pub fn to_text(&self) -> String {
        TRAIN_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return bad("lr and tau must be positive".into());
        }
        if self.batch_size == 0 || self.total_iters == 0 {
            return bad("batch_size and total_iters must be positive".into());
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0) {
                return bad(format!("{name} must be nonnegative"));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) || !(0.0..=1.0).contains(&self.ema_m) {
            return bad("threshold and ema_m must lie in [0, 1]".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.decay_power <= 0.0 {
            return bad("weight_decay, grad_clip must be >= 0 and decay_power > 0".into());
        }
        let stride = crate::model::STRIDE;
        if self.crop == 0 || self.crop % stride != 0 || self.patch_crop == 0 || self.patch_crop % stride != 0 {
            return bad(format!("crop sizes must be positive multiples of {stride}"));
        }
        if !(0.0 <= self.iou_lo && self.iou_lo <= self.iou_hi && self.iou_hi <= 1.0) {
            return bad("need 0 <= iou_lo <= iou_hi <= 1".into());
        }
        if !(0.0 < self.ratio_lo && self.ratio_lo <= self.ratio_hi) {
            return bad("need 0 < ratio_lo <= ratio_hi".into());
        }
        TemporalRange::new(self.temporal_min, self.temporal_max)?;
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad("num_classes must lie in [2, 255]".into());
        }
        if self.stage_channels.contains(&0) || self.feat_dim == 0 || self.embed_dim == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.bank_capacity == 0 {
            return bad("bank_capacity must be positive".into());
        }
        self.contrast().validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.num_classes,
            stage_channels: self.stage_channels,
            feat_dim: self.feat_dim,
            embed_dim: self.embed_dim,
        }
    }

    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            max_anchors_per_class: self.max_anchors_per_class,
            negatives_per_anchor: self.negatives_per_anchor,
            bank_per_class: self.bank_per_class,
            normalize_by_pairs: self.normalize_by_pairs,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn patch_sampler(&self) -> PatchSampler {
        PatchSampler {
            crop: self.patch_crop,
            iou_range: (self.iou_lo, self.iou_hi),
            stride: crate::model::STRIDE,
            ratio_range: (self.ratio_lo, self.ratio_hi),
        }
    }

    pub fn temporal_range(&self) -> TemporalRange {
        TemporalRange {
            min_gap: self.temporal_min,
            max_gap: self.temporal_max,
        }
    }

    /// Whether each term is computed this run: toggled on with a positive
    /// weight, temporal only for video.
    pub fn pixel_active(&self) -> bool {
        self.use_pixel && self.alpha > 0.0
    }

    pub fn patch_active(&self) -> bool {
        self.use_patch && self.beta > 0.0
    }

    pub fn temporal_active(&self) -> bool {
        self.scenario == Scenario::Video && self.use_temporal && self.gamma > 0.0
    }
}

/// Splits `key = value` text into pairs, skipping blank and `#` lines.
pub fn parse_assignments(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses an override of the form `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_assignments(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
