//! Synthetic two-domain datasets and their on-disk format.

mod io;
mod synth;

use std::cell::Cell;

pub use io::{
    load_dataset, load_manifest, load_sample, save_dataset, save_manifest, save_sample,
    DatasetManifest, ManifestRecord, MANIFEST_FILE, SAMPLE_HEADER_LEN, SAMPLE_MAGIC,
};
pub use synth::{
    gen_static_dataset, gen_video_dataset, hue_rotation_matrix, render_scene, Scene, SceneConfig,
    Shape, ShapeKind, StyleShift,
};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE_INDEX: u16 = 255;

/// `H x W` class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != h * w || h == 0 || w == 0 {
            return Err(Error::invalid(
                "label_map",
                format!("{h}x{w} map given {} labels", data.len()),
            ));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: u16) -> Self {
        LabelMap {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u16) {
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    /// Sorted distinct labels other than the ignore index.
    pub fn present_classes(&self) -> Vec<u16> {
        let mut seen = [false; 256];
        for &v in &self.data {
            if v != IGNORE_INDEX {
                seen[v as usize & 0xff] = true;
            }
        }
        (0..256u16).filter(|&c| seen[c as usize]).collect()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> LabelMap {
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.w + x0..y * self.w + x0 + w]);
        }
        LabelMap { h, w, data }
    }

    /// Labels as loss targets, ignore index mapped to `ignore`.
    pub fn targets(&self, ignore: usize) -> Vec<usize> {
        self.data
            .iter()
            .map(|&v| if v == IGNORE_INDEX { ignore } else { v as usize })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

thread_local! {
    static EVAL_LABEL_READS: Cell<usize> = const { Cell::new(0) };
}

/// Number of evaluation-split label reads made on this thread.
pub fn eval_label_reads() -> usize {
    EVAL_LABEL_READS.with(|c| c.get())
}

/// One image with its optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    /// `[3, H, W]`, values in `[0, 1]`, each exactly representable as `f32`.
    pub image: Tensor,
    label: Option<LabelMap>,
    pub domain: Domain,
    pub split: Split,
    pub id: u64,
}

impl DomainSample {
    pub fn new(
        image: Tensor,
        label: Option<LabelMap>,
        domain: Domain,
        split: Split,
        id: u64,
    ) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::invalid("sample", format!("image must be [3, H, W], got {s:?}")));
        }
        if let Some(l) = &label {
            if l.h != s[1] || l.w != s[2] {
                return Err(Error::invalid(
                    "sample",
                    format!("label {}x{} vs image {}x{}", l.h, l.w, s[1], s[2]),
                ));
            }
        }
        if label.is_none() && (domain == Domain::Source || split == Split::Eval) {
            return Err(Error::invalid(
                "sample",
                "source and evaluation samples must carry labels",
            ));
        }
        Ok(DomainSample {
            image,
            label,
            domain,
            split,
            id,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn has_label(&self) -> bool {
        self.label.is_some()
    }

    /// Ground truth; every read of an evaluation label is counted.
    pub fn label(&self) -> Option<&LabelMap> {
        if self.split == Split::Eval && self.label.is_some() {
            EVAL_LABEL_READS.with(|c| c.set(c.get() + 1));
        }
        self.label.as_ref()
    }
}

/// Position of a frame inside a video clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClipRef {
    pub clip_id: u64,
    pub frame: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub sample: DomainSample,
    pub clip: Option<ClipRef>,
}

/// Ordered collection of generated or loaded samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

/// Frames of one clip, in order.
#[derive(Clone, Debug)]
pub struct VideoClip<'a> {
    pub clip_id: u64,
    pub frames: Vec<&'a DomainSample>,
}

impl Dataset {
    pub fn select(&self, domain: Domain, split: Split) -> Vec<&DomainSample> {
        self.entries
            .iter()
            .filter(|e| e.sample.domain == domain && e.sample.split == split)
            .map(|e| &e.sample)
            .collect()
    }

    pub fn source_train(&self) -> Vec<&DomainSample> {
        self.select(Domain::Source, Split::Train)
    }

    pub fn target_train(&self) -> Vec<&DomainSample> {
        self.select(Domain::Target, Split::Train)
    }

    pub fn target_eval(&self) -> Vec<&DomainSample> {
        self.select(Domain::Target, Split::Eval)
    }

    /// Clips of one domain/split in first-appearance order.
    pub fn clips(&self, domain: Domain, split: Split) -> Vec<VideoClip<'_>> {
        let mut out: Vec<VideoClip<'_>> = Vec::new();
        for e in &self.entries {
            let Some(c) = e.clip else { continue };
            if e.sample.domain != domain || e.sample.split != split {
                continue;
            }
            match out.iter_mut().find(|v| v.clip_id == c.clip_id) {
                Some(v) => v.frames.push(&e.sample),
                None => out.push(VideoClip {
                    clip_id: c.clip_id,
                    frames: vec![&e.sample],
                }),
            }
        }
        out
    }

    /// The dataset without its evaluation split.
    pub fn training_view(&self) -> Dataset {
        Dataset {
            entries: self
                .entries
                .iter()
                .filter(|e| e.sample.split == Split::Train)
                .cloned()
                .collect(),
        }
    }
}
