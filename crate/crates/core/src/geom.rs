//! Crop geometry for the two overlapping patches used by patch contrast.
//!
//! All rectangles live in resized-image pixel coordinates and are snapped
//! to multiples of the feature stride, so the overlap maps onto whole
//! feature cells of both patches.

use rand::Rng;

use crate::diffcore::{resize_taps, Tensor};
use crate::error::{Error, Result};

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Geometry(format!(
                "empty rectangle ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(Rect { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(Rect { x0, y0, x1, y1 })
    }
}

/// Intersection over union; 0 for disjoint rectangles.
pub fn rect_iou(a: &Rect, b: &Rect) -> f64 {
    match a.intersect(b) {
        None => 0.0,
        Some(i) => {
            let inter = i.area() as f64;
            inter / (a.area() as f64 + b.area() as f64 - inter)
        }
    }
}

/// Two equally sized crops of a resized image and their overlap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchPairSpec {
    pub resize_ratio: f64,
    /// Extents of the resized image the rectangles live in.
    pub image_w: usize,
    pub image_h: usize,
    pub rect1: Rect,
    pub rect2: Rect,
    pub overlap: Rect,
    pub stride: usize,
}

impl PatchPairSpec {
    /// Feature-grid width and height of each patch.
    pub fn grid(&self) -> (usize, usize) {
        (
            self.rect1.width() / self.stride,
            self.rect1.height() / self.stride,
        )
    }

    pub fn iou(&self) -> f64 {
        rect_iou(&self.rect1, &self.rect2)
    }

    /// Checks every structural invariant of a patch pair.
    pub fn validate(&self, iou_range: (f64, f64)) -> Result<()> {
        let s = self.stride;
        let fail = |m: String| Err(Error::Geometry(m));
        if s == 0 {
            return fail("stride must be positive".into());
        }
        if self.rect1.width() != self.rect2.width() || self.rect1.height() != self.rect2.height() {
            return fail(format!("unequal crops {:?} / {:?}", self.rect1, self.rect2));
        }
        for r in [&self.rect1, &self.rect2] {
            if r.x1 > self.image_w || r.y1 > self.image_h {
                return fail(format!("{r:?} exceeds {}x{}", self.image_w, self.image_h));
            }
            if [r.x0, r.y0, r.x1, r.y1].iter().any(|v| v % s != 0) {
                return fail(format!("{r:?} not aligned to stride {s}"));
            }
        }
        if self.rect1.intersect(&self.rect2) != Some(self.overlap) {
            return fail("overlap is not the intersection of the crops".into());
        }
        let iou = self.iou();
        if iou < iou_range.0 || iou > iou_range.1 {
            return fail(format!("IoU {iou} outside {iou_range:?}"));
        }
        Ok(())
    }
}

/// Parameters of [`sample_patch_pair`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchSampler {
    pub crop: usize,
    pub iou_range: (f64, f64),
    pub stride: usize,
    /// Resize ratios are drawn uniformly from this range, intersected with
    /// the ratios that keep the resized image at least `crop` wide.
    pub ratio_range: (f64, f64),
}

impl Default for PatchSampler {
    fn default() -> Self {
        PatchSampler {
            crop: 48,
            iou_range: (0.1, 1.0),
            stride: 4,
            ratio_range: (0.5, 2.0),
        }
    }
}

pub const MAX_PATCH_TRIALS: usize = 1000;

/// Draws a resize ratio and two stride-aligned crops whose IoU falls in
/// `cfg.iou_range`.
///
/// Each trial places the first crop uniformly and then picks the second
/// uniformly among the placements that satisfy the IoU range; a trial
/// fails when no such placement exists.
pub fn sample_patch_pair<R: Rng + ?Sized>(
    img_w: usize,
    img_h: usize,
    cfg: &PatchSampler,
    rng: &mut R,
) -> Result<PatchPairSpec> {
    let PatchSampler {
        crop,
        iou_range: (lo, hi),
        stride,
        ratio_range: (rlo, rhi),
    } = *cfg;
    if stride == 0 || crop == 0 || crop % stride != 0 {
        return Err(Error::Geometry(format!(
            "crop {crop} must be a positive multiple of stride {stride}"
        )));
    }
    if !(0.0..=1.0).contains(&lo) || lo > hi {
        return Err(Error::Geometry(format!("bad IoU range [{lo}, {hi}]")));
    }
    let min_side = img_w.min(img_h) as f64;
    let rlo = rlo.max(crop as f64 / min_side);
    if rlo > rhi {
        return Err(Error::Geometry(format!(
            "image {img_w}x{img_h} too small for crop {crop} at ratios up to {rhi}"
        )));
    }
    let ratio = if rlo == rhi { rlo } else { rng.gen_range(rlo..=rhi) };
    let snap = |v: f64| ((v + 1e-9).floor() as usize / stride) * stride;
    let image_w = snap(img_w as f64 * ratio).max(crop);
    let image_h = snap(img_h as f64 * ratio).max(crop);
    let nx = (image_w - crop) / stride + 1;
    let ny = (image_h - crop) / stride + 1;
    let place = |gx: usize, gy: usize| Rect {
        x0: gx * stride,
        y0: gy * stride,
        x1: gx * stride + crop,
        y1: gy * stride + crop,
    };
    let mut feasible = Vec::new();
    for _ in 0..MAX_PATCH_TRIALS {
        let rect1 = place(rng.gen_range(0..nx), rng.gen_range(0..ny));
        feasible.clear();
        for gy in 0..ny {
            for gx in 0..nx {
                let r = place(gx, gy);
                let iou = rect_iou(&rect1, &r);
                if iou >= lo && iou <= hi && iou > 0.0 {
                    feasible.push(r);
                }
            }
        }
        if feasible.is_empty() {
            continue;
        }
        let rect2 = feasible[rng.gen_range(0..feasible.len())];
        let overlap = rect1.intersect(&rect2).expect("positive IoU implies overlap");
        return Ok(PatchPairSpec {
            resize_ratio: ratio,
            image_w,
            image_h,
            rect1,
            rect2,
            overlap,
            stride,
        });
    }
    Err(Error::Geometry(format!(
        "no crop pair with IoU in [{lo}, {hi}] after {MAX_PATCH_TRIALS} trials \
         (resized image {image_w}x{image_h}, crop {crop}); image too small for the IoU range"
    )))
}

/// Flat feature-grid index pairs `(in patch 1, in patch 2)` that see the
/// same image location, in row-major order over the overlap.
pub fn overlap_correspondence(spec: &PatchPairSpec) -> Vec<(usize, usize)> {
    let s = spec.stride;
    let (gw, _) = spec.grid();
    let o = &spec.overlap;
    let mut pairs = Vec::with_capacity((o.width() / s) * (o.height() / s));
    for v in (o.y0 / s)..(o.y1 / s) {
        for u in (o.x0 / s)..(o.x1 / s) {
            let i = (v - spec.rect1.y0 / s) * gw + (u - spec.rect1.x0 / s);
            let j = (v - spec.rect2.y0 / s) * gw + (u - spec.rect2.x0 / s);
            pairs.push((i, j));
        }
    }
    pairs
}

/// Image feature-cell coordinate `(u, v)` of flat index `idx` in a patch.
pub fn cell_to_image(rect: &Rect, stride: usize, idx: usize) -> (usize, usize) {
    let gw = rect.width() / stride;
    (rect.x0 / stride + idx % gw, rect.y0 / stride + idx / gw)
}

/// Flat index of image feature cell `(u, v)` in a patch, if inside it.
pub fn image_to_cell(rect: &Rect, stride: usize, (u, v): (usize, usize)) -> Option<usize> {
    let (gx0, gy0) = (rect.x0 / stride, rect.y0 / stride);
    let (gw, gh) = (rect.width() / stride, rect.height() / stride);
    (u >= gx0 && v >= gy0 && u < gx0 + gw && v < gy0 + gh).then(|| (v - gy0) * gw + (u - gx0))
}

/// Bilinear resize of a `[C, H, W]` image (half-pixel centers).
pub fn resize_image(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let ys = resize_taps(h, out_h);
    let xs = resize_taps(w, out_w);
    let d = img.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ci in 0..c {
        let src = &d[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                out[(ci * out_h + oy) * out_w + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("extents are positive")
}

/// Copies `rect` out of a `[C, H, W]` image.
pub fn crop_image(img: &Tensor, rect: &Rect) -> Result<Tensor> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if rect.x1 > w || rect.y1 > h {
        return Err(Error::Geometry(format!("{rect:?} exceeds image {w}x{h}")));
    }
    let mut out = Vec::with_capacity(c * rect.area());
    for ci in 0..c {
        for y in rect.y0..rect.y1 {
            let row = (ci * h + y) * w;
            out.extend_from_slice(&img.data()[row + rect.x0..row + rect.x1]);
        }
    }
    Tensor::new(&[c, rect.height(), rect.width()], out)
}
