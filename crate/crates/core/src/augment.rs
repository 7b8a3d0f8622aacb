//! Class-based domain mixing and photometric jitter.

use rand::seq::index;
use rand::Rng;

use crate::data::{LabelMap, IGNORE_INDEX};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Which source classes were pasted onto which target sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixSpec {
    /// Sorted.
    pub selected_classes: Vec<u16>,
    pub source_id: u64,
    pub target_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mixed {
    pub image: Tensor,
    pub labels: LabelMap,
    /// True on pasted pixels and on confidently pseudo-labeled target pixels.
    pub keep: Vec<bool>,
    /// True where the pixel came from the source.
    pub pasted: Vec<bool>,
}

/// Half of the present classes, rounded half up and at least one.
pub fn select_classes<R: Rng + ?Sized>(y_s: &LabelMap, rng: &mut R) -> Vec<u16> {
    let present = y_s.present_classes();
    if present.is_empty() {
        return Vec::new();
    }
    let k = present.len().div_ceil(2).max(1);
    let mut out: Vec<u16> = index::sample(rng, present.len(), k)
        .into_iter()
        .map(|i| present[i])
        .collect();
    out.sort_unstable();
    out
}

/// Pastes every source pixel whose label is in `selected` over the target.
/// Ignore-labeled source pixels are never pasted.
pub fn classmix_with(
    x_s: &Tensor,
    y_s: &LabelMap,
    x_t: &Tensor,
    y_t: &LabelMap,
    keep: &[bool],
    selected: &[u16],
) -> Result<Mixed> {
    let (ss, st) = (x_s.shape(), x_t.shape());
    if ss != st || ss.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "classmix",
            left: ss.to_vec(),
            right: st.to_vec(),
        });
    }
    let (c, h, w) = (ss[0], ss[1], ss[2]);
    if (y_s.h, y_s.w) != (h, w) || (y_t.h, y_t.w) != (h, w) || keep.len() != h * w {
        return Err(Error::invalid(
            "classmix",
            format!(
                "labels {}x{} / {}x{} and {} keep flags vs image {h}x{w}",
                y_s.h,
                y_s.w,
                y_t.h,
                y_t.w,
                keep.len()
            ),
        ));
    }
    let mut on = [false; 256];
    for &k in selected {
        if k != IGNORE_INDEX {
            on[k as usize & 0xff] = true;
        }
    }
    let pasted: Vec<bool> = y_s
        .data()
        .iter()
        .map(|&l| l != IGNORE_INDEX && on[l as usize & 0xff])
        .collect();
    let mut image = x_t.clone();
    let (src, dst) = (x_s.data(), image.data_mut());
    for ch in 0..c {
        for p in 0..h * w {
            if pasted[p] {
                dst[ch * h * w + p] = src[ch * h * w + p];
            }
        }
    }
    let mut labels = y_t.clone();
    for (p, l) in labels.data_mut().iter_mut().enumerate() {
        if pasted[p] {
            *l = y_s.data()[p];
        }
    }
    let keep = keep.iter().zip(&pasted).map(|(&k, &p)| k || p).collect();
    Ok(Mixed {
        image,
        labels,
        keep,
        pasted,
    })
}

/// ClassMix with a random half of the source image's classes.
pub fn classmix<R: Rng + ?Sized>(
    x_s: &Tensor,
    y_s: &LabelMap,
    x_t: &Tensor,
    y_t: &LabelMap,
    keep: &[bool],
    rng: &mut R,
) -> Result<(Mixed, Vec<u16>)> {
    let selected = select_classes(y_s, rng);
    let mixed = classmix_with(x_s, y_s, x_t, y_t, keep, &selected)?;
    Ok((mixed, selected))
}

/// Jitter strengths; a strength of 0 disables that component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricParams {
    /// Factors are drawn from `[1 - s, 1 + s]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for PhotometricParams {
    fn default() -> Self {
        PhotometricParams {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl PhotometricParams {
    pub const NONE: PhotometricParams = PhotometricParams {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        blur_prob: 0.0,
        blur_sigma: (0.1, 2.0),
    };
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of a `[C, H, W]` image with clamped borders.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let xx = (x as i64 + t as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[base + y * w + xx];
                }
                tmp[base + y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let yy = (y as i64 + t as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[base + yy * w + x];
                }
                out[base + y * w + x] = acc;
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

/// Brightness, contrast and saturation jitter followed by an optional blur,
/// clamped to `[0, 1]`. The number of draws from `rng` is fixed.
pub fn photometric<R: Rng + ?Sized>(x: &Tensor, rng: &mut R, p: &PhotometricParams) -> Tensor {
    let mut factor = |s: f64| {
        let u: f64 = rng.gen();
        1.0 - s + 2.0 * s * u
    };
    let fb = factor(p.brightness);
    let fc = factor(p.contrast);
    let fs = factor(p.saturation);
    let blur: f64 = rng.gen();
    let sigma_u: f64 = rng.gen();

    let s = x.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut d = x.data().to_vec();
    if p.brightness > 0.0 {
        d.iter_mut().for_each(|v| *v *= fb);
    }
    if p.contrast > 0.0 {
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        d.iter_mut().for_each(|v| *v = (*v - mean) * fc + mean);
    }
    if p.saturation > 0.0 && c == 3 {
        for i in 0..hw {
            let gray = 0.299 * d[i] + 0.587 * d[hw + i] + 0.114 * d[2 * hw + i];
            for ch in 0..3 {
                let v = &mut d[ch * hw + i];
                *v = (*v - gray) * fs + gray;
            }
        }
    }
    let mut out = Tensor::new(s, d).expect("same shape");
    if blur < p.blur_prob {
        let (lo, hi) = p.blur_sigma;
        out = gaussian_blur(&out, lo + (hi - lo) * sigma_u);
    }
    out.map(|v| v.clamp(0.0, 1.0))
}
