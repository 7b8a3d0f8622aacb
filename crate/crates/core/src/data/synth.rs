//! Procedural scenes of colored shapes on a background.
//!
//! Both domains draw scene geometry from the same distribution; only the
//! rendering style differs. The target style rotates hues, adds a vertical
//! brightness gradient, a sinusoidal texture and pixel noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ClipRef, Dataset, DatasetEntry, Domain, DomainSample, LabelMap, Split};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl ShapeKind {
    /// Shape drawn for a foreground class (1-based).
    pub fn for_class(class: u16) -> ShapeKind {
        match (class.max(1) - 1) % 4 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Ring,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub class: u16,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub color: [f64; 3],
    /// Displacement per frame.
    pub vx: f64,
    pub vy: f64,
}

impl Shape {
    /// Whether the point `(px, py)` lies in the shape's analytic region.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.r * self.r,
            ShapeKind::Square => {
                let h = 0.85 * self.r;
                dx.abs() <= h && dy.abs() <= h
            }
            ShapeKind::Triangle => {
                // Apex up, base at cy + r.
                if dy < -self.r || dy > self.r {
                    return false;
                }
                let half = 0.5 * (dy + self.r);
                dx.abs() <= half
            }
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= self.r * self.r && d2 >= (0.5 * self.r).powi(2)
            }
        }
    }

    pub fn at_frame(&self, t: usize) -> Shape {
        Shape {
            cx: self.cx + self.vx * t as f64,
            cy: self.cy + self.vy * t as f64,
            ..*self
        }
    }
}

/// Appearance transform applied after rasterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleShift {
    pub hue_deg: f64,
    /// Relative brightness change from top (-g) to bottom (+g).
    pub brightness_grad: f64,
    pub noise_sigma: f64,
    pub texture_amp: f64,
}

impl StyleShift {
    pub const IDENTITY: StyleShift = StyleShift {
        hue_deg: 0.0,
        brightness_grad: 0.0,
        noise_sigma: 0.0,
        texture_amp: 0.0,
    };

    pub fn default_target() -> Self {
        StyleShift {
            hue_deg: 40.0,
            brightness_grad: 0.2,
            noise_sigma: 0.05,
            texture_amp: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    /// Background plus foreground shape classes.
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of shapes per scene.
    pub shapes_per_scene: (usize, usize),
    pub radius: (f64, f64),
    /// Per-instance hue jitter in degrees.
    pub hue_jitter_deg: f64,
    /// Maximum per-axis speed in pixels per frame.
    pub max_speed: f64,
    pub source_style: StyleShift,
    pub target_style: StyleShift,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            num_classes: 5,
            height: 64,
            width: 64,
            shapes_per_scene: (2, 4),
            radius: (6.0, 12.0),
            hue_jitter_deg: 12.0,
            max_speed: 1.5,
            source_style: StyleShift::IDENTITY,
            target_style: StyleShift::default_target(),
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes {} outside [2, 255]", self.num_classes)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene extents must be positive".into()));
        }
        if self.shapes_per_scene.0 > self.shapes_per_scene.1 || self.radius.0 > self.radius.1 {
            return Err(Error::Config("empty shape count or radius range".into()));
        }
        Ok(())
    }

    pub fn style(&self, domain: Domain) -> StyleShift {
        match domain {
            Domain::Source => self.source_style,
            Domain::Target => self.target_style,
        }
    }
}

/// Geometry and colors of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub shapes: Vec<Shape>,
    /// Spatial frequency (cycles per image, x and y) and phase of the texture.
    pub texture: (f64, f64, f64),
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Rotation of RGB space about the gray axis by `deg`.
pub fn hue_rotation_matrix(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = (1.0f64 / 3.0).sqrt() * s;
    [
        [c + a, a - b, a + b],
        [a + b, c + a, a - b],
        [a - b, a + b, c + a],
    ]
}

impl Scene {
    pub fn sample<R: Rng + ?Sized>(cfg: &SceneConfig, video: bool, rng: &mut R) -> Scene {
        let n = rng.gen_range(cfg.shapes_per_scene.0..=cfg.shapes_per_scene.1);
        let fg = (cfg.num_classes - 1) as f64;
        let (w, h) = (cfg.width as f64, cfg.height as f64);
        let g = rng.gen_range(0.35..0.6);
        let background = [g, g, g];
        let shapes = (0..n)
            .map(|_| {
                let class = rng.gen_range(1..cfg.num_classes) as u16;
                let r = rng.gen_range(cfg.radius.0..=cfg.radius.1);
                let hue = (class - 1) as f64 * 360.0 / fg
                    + rng.gen_range(-cfg.hue_jitter_deg..=cfg.hue_jitter_deg);
                let sat = rng.gen_range(0.6..0.9);
                let val = rng.gen_range(0.7..0.95);
                let (vx, vy) = if video && cfg.max_speed > 0.0 {
                    (
                        rng.gen_range(-cfg.max_speed..=cfg.max_speed),
                        rng.gen_range(-cfg.max_speed..=cfg.max_speed),
                    )
                } else {
                    (0.0, 0.0)
                };
                Shape {
                    kind: ShapeKind::for_class(class),
                    class,
                    cx: rng.gen_range(0.15 * w..=0.85 * w),
                    cy: rng.gen_range(0.15 * h..=0.85 * h),
                    r,
                    color: hsv_to_rgb(hue, sat, val),
                    vx,
                    vy,
                }
            })
            .collect();
        let texture = (
            rng.gen_range(2.0..6.0),
            rng.gen_range(2.0..6.0),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        Scene {
            width: cfg.width,
            height: cfg.height,
            background,
            shapes,
            texture,
        }
    }

    /// Label of the topmost shape covering each pixel center at frame `t`.
    pub fn labels(&self, t: usize) -> LabelMap {
        let mut labels = LabelMap::filled(self.height, self.width, 0);
        for shape in self.shapes.iter().map(|s| s.at_frame(t)) {
            for y in 0..self.height {
                for x in 0..self.width {
                    if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        labels.set(x, y, shape.class);
                    }
                }
            }
        }
        labels
    }
}

/// Rasterizes frame `t` of a scene in the given style. Noise is drawn from
/// `rng`; values are clamped to `[0, 1]` and rounded to `f32` precision.
pub fn render_scene<R: Rng + ?Sized>(
    scene: &Scene,
    style: &StyleShift,
    t: usize,
    rng: &mut R,
) -> (Tensor, LabelMap) {
    let (h, w) = (scene.height, scene.width);
    let labels = scene.labels(t);
    let mut rgb = vec![scene.background; h * w];
    for shape in scene.shapes.iter().map(|s| s.at_frame(t)) {
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    rgb[y * w + x] = shape.color;
                }
            }
        }
    }
    let rot = hue_rotation_matrix(style.hue_deg);
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("finite sigma");
    let (fx, fy, phase) = scene.texture;
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        let gain = 1.0 + style.brightness_grad * (2.0 * (y as f64 + 0.5) / h as f64 - 1.0);
        for x in 0..w {
            let px = rgb[y * w + x];
            let tex = style.texture_amp
                * (std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64)
                    + phase)
                    .sin();
            for c in 0..3 {
                let mut v = rot[c][0] * px[0] + rot[c][1] * px[1] + rot[c][2] * px[2];
                v = v * gain + tex;
                if style.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                out[(c * h + y) * w + x] = (v.clamp(0.0, 1.0) as f32) as f64;
            }
        }
    }
    (
        Tensor::new(&[3, h, w], out).expect("extents are positive"),
        labels,
    )
}

const TAG_SOURCE: u64 = 0;
const TAG_TARGET_TRAIN: u64 = 1;
const TAG_TARGET_EVAL: u64 = 2;

fn split_tag(domain: Domain, split: Split) -> u64 {
    match (domain, split) {
        (Domain::Source, _) => TAG_SOURCE,
        (Domain::Target, Split::Train) => TAG_TARGET_TRAIN,
        (Domain::Target, Split::Eval) => TAG_TARGET_EVAL,
    }
}

const GROUPS: [(Domain, Split); 3] = [
    (Domain::Source, Split::Train),
    (Domain::Target, Split::Train),
    (Domain::Target, Split::Eval),
];

/// Source training, target training (unlabeled) and target evaluation
/// samples, in that order. Fully determined by `seed`.
pub fn gen_static_dataset(
    cfg: &SceneConfig,
    n_source: usize,
    n_target: usize,
    n_eval: usize,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    if n_source == 0 || n_target == 0 || n_eval == 0 {
        return Err(Error::Config("sample counts must be at least 1".into()));
    }
    let mut entries = Vec::with_capacity(n_source + n_target + n_eval);
    let mut id = 0u64;
    for ((domain, split), count) in GROUPS.into_iter().zip([n_source, n_target, n_eval]) {
        let tag = split_tag(domain, split);
        for i in 0..count {
            let mut rng = derive(seed, Stream::Data, &[tag, i as u64]);
            let scene = Scene::sample(cfg, false, &mut rng);
            let (image, labels) = render_scene(&scene, &cfg.style(domain), 0, &mut rng);
            let label = (domain == Domain::Source || split == Split::Eval).then_some(labels);
            entries.push(DatasetEntry {
                sample: DomainSample::new(image, label, domain, split, id)?,
                clip: None,
            });
            id += 1;
        }
    }
    Ok(Dataset { entries })
}

/// `n_clips` clips each of source training, target training and target
/// evaluation video, `clip_len` consecutive frames per clip. Shapes move
/// with constant per-shape velocity and are clipped at the borders.
pub fn gen_video_dataset(
    cfg: &SceneConfig,
    n_clips: usize,
    clip_len: usize,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    if clip_len < 4 {
        return Err(Error::Config(format!("clip length {clip_len} must be at least 4")));
    }
    if n_clips == 0 {
        return Err(Error::Config("clip count must be at least 1".into()));
    }
    let mut entries = Vec::with_capacity(3 * n_clips * clip_len);
    let mut id = 0u64;
    let mut clip_id = 0u64;
    for (domain, split) in GROUPS {
        let tag = split_tag(domain, split);
        for c in 0..n_clips {
            let mut scene_rng = derive(seed, Stream::Data, &[tag, c as u64, u64::MAX]);
            let scene = Scene::sample(cfg, true, &mut scene_rng);
            for t in 0..clip_len {
                let mut rng = derive(seed, Stream::Data, &[tag, c as u64, t as u64]);
                let (image, labels) = render_scene(&scene, &cfg.style(domain), t, &mut rng);
                let label = (domain == Domain::Source || split == Split::Eval).then_some(labels);
                entries.push(DatasetEntry {
                    sample: DomainSample::new(image, label, domain, split, id)?,
                    clip: Some(ClipRef { clip_id, frame: t }),
                });
                id += 1;
            }
            clip_id += 1;
        }
    }
    Ok(Dataset { entries })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SceneConfig::default();
        let a = gen_static_dataset(&cfg, 3, 3, 2, 7).unwrap();
        let b = gen_static_dataset(&cfg, 3, 3, 2, 7).unwrap();
        assert_eq!(a, b);
        let c = gen_static_dataset(&cfg, 3, 3, 2, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn labeled_pixels_lie_inside_shapes() {
        let cfg = SceneConfig::default();
        for i in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let scene = Scene::sample(&cfg, false, &mut rng);
            let (_, labels) = render_scene(&scene, &cfg.source_style, 0, &mut rng);
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let l = labels.get(x, y);
                    if l == 0 {
                        continue;
                    }
                    // Re-rasterize: some shape of that class must contain the center.
                    assert!(scene
                        .shapes
                        .iter()
                        .any(|s| s.class == l && s.contains(x as f64 + 0.5, y as f64 + 0.5)));
                }
            }
        }
    }

    #[test]
    fn most_scenes_have_two_classes() {
        let cfg = SceneConfig::default();
        let ds = gen_static_dataset(&cfg, 1000, 1, 1, 0).unwrap();
        let ok = ds
            .source_train()
            .iter()
            .filter(|s| s.label().unwrap().present_classes().len() >= 2)
            .count();
        assert!(ok >= 950, "{ok}");
    }

    #[test]
    fn source_and_target_label_histograms_match() {
        let cfg = SceneConfig::default();
        let ds = gen_static_dataset(&cfg, 400, 1, 400, 3).unwrap();
        let hist = |samples: Vec<&DomainSample>| {
            let mut h = vec![0f64; cfg.num_classes];
            let mut n = 0.0;
            for s in samples {
                for &v in s.label().unwrap().data() {
                    h[v as usize] += 1.0;
                    n += 1.0;
                }
            }
            h.iter().map(|c| c / n).collect::<Vec<_>>()
        };
        let hs = hist(ds.source_train());
        let ht = hist(ds.target_eval());
        for (a, b) in hs.iter().zip(&ht) {
            assert!((a - b).abs() < 0.02, "{hs:?} vs {ht:?}");
        }
    }

    #[test]
    fn target_training_samples_are_unlabeled() {
        let ds = gen_static_dataset(&SceneConfig::default(), 2, 2, 2, 0).unwrap();
        assert!(ds.target_train().iter().all(|s| !s.has_label()));
        assert!(ds.source_train().iter().all(|s| s.has_label()));
        assert!(ds.target_eval().iter().all(|s| s.has_label()));
    }

    #[test]
    fn zero_velocity_gives_identical_frames() {
        let cfg = SceneConfig {
            max_speed: 0.0,
            target_style: StyleShift {
                noise_sigma: 0.0,
                ..StyleShift::default_target()
            },
            ..SceneConfig::default()
        };
        let ds = gen_video_dataset(&cfg, 2, 4, 1).unwrap();
        for domain in [Domain::Source, Domain::Target] {
            for clip in ds.clips(domain, Split::Train) {
                for f in &clip.frames[1..] {
                    assert_eq!(f.image, clip.frames[0].image);
                }
            }
        }
    }

    #[test]
    fn centroid_moves_by_velocity() {
        let cfg = SceneConfig {
            shapes_per_scene: (1, 1),
            radius: (6.0, 6.0),
            ..SceneConfig::default()
        };
        let mut checked = 0;
        for seed in 0..40u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut scene = Scene::sample(&cfg, true, &mut rng);
            // Keep the shape away from the borders for the whole clip.
            scene.shapes[0].cx = 32.0;
            scene.shapes[0].cy = 32.0;
            let s = scene.shapes[0];
            let centroid = |t: usize| {
                let l = scene.labels(t);
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for y in 0..l.h {
                    for x in 0..l.w {
                        if l.get(x, y) == s.class {
                            sx += x as f64 + 0.5;
                            sy += y as f64 + 0.5;
                            n += 1.0;
                        }
                    }
                }
                (sx / n, sy / n)
            };
            for t in 0..5 {
                let (x0, y0) = centroid(t);
                let (x1, y1) = centroid(t + 1);
                assert!((x1 - x0 - s.vx).abs() <= 1.0 && (y1 - y0 - s.vy).abs() <= 1.0);
                checked += 1;
            }
        }
        assert_eq!(checked, 200);
    }

    #[test]
    fn video_is_deterministic_and_consecutive() {
        let cfg = SceneConfig::default();
        let a = gen_video_dataset(&cfg, 2, 5, 4).unwrap();
        let b = gen_video_dataset(&cfg, 2, 5, 4).unwrap();
        assert_eq!(a, b);
        for clip in a.clips(Domain::Target, Split::Train) {
            assert_eq!(clip.frames.len(), 5);
        }
        let frames: Vec<usize> = a
            .entries
            .iter()
            .filter(|e| e.clip.unwrap().clip_id == 3)
            .map(|e| e.clip.unwrap().frame)
            .collect();
        assert_eq!(frames, vec![0, 1, 2, 3, 4]);
        assert!(gen_video_dataset(&cfg, 1, 3, 0).is_err());
    }

    #[test]
    fn images_stay_in_unit_range_and_f32_exact() {
        let ds = gen_static_dataset(&SceneConfig::default(), 2, 2, 1, 5).unwrap();
        for e in &ds.entries {
            for &v in e.sample.image.data() {
                assert!((0.0..=1.0).contains(&v));
                assert_eq!((v as f32) as f64, v);
            }
        }
    }
}
