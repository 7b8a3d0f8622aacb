//! One optimization step of the full objective, static and video.

use std::cell::Cell;

use rand::Rng;

use super::config::TrainConfig;
use super::optim::{clip_grad_norm, optimizer_step, AdamW, OptimState};
use super::schedule::lr_schedule;
use crate::augment::{classmix, photometric, Mixed, PhotometricParams};
use crate::bank::{sample_reference_frame, FeatureBank};
use crate::data::{Dataset, Domain, DomainSample, LabelMap, Split, IGNORE_INDEX};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{crop_image, overlap_correspondence, resize_image, sample_patch_pair, Rect};
use crate::losses::{
    ce_source, ce_target_mixed, patch_contrast, pixel_contrast, plan_pixel_contrast, temporal_contrast,
    total_loss, LossReport, LossVars, Scenario,
};
use crate::model::{
    ema_update, forward_cls, forward_features, forward_head, labels_to_grid, pseudo_label, stack_images, Bound,
    HeadKind, SegNet, TeacherState, STRIDE,
};
use crate::rng::{derive, Stream};

/// Complete mutable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub student: SegNet,
    pub teacher: TeacherState,
    pub optim: OptimState,
    pub bank: FeatureBank,
    /// Number of completed steps.
    pub iter: u64,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive(cfg.seed, Stream::Init, &[]);
        let student = SegNet::new(cfg.model(), &mut rng);
        let teacher = TeacherState::from_student(&student, cfg.ema_m);
        let optim = OptimState::new(&student.params);
        let bank = FeatureBank::new(cfg.num_classes, cfg.embed_dim, cfg.bank_capacity)?;
        Ok(TrainState {
            cfg,
            student,
            teacher,
            optim,
            bank,
            iter: 0,
        })
    }

    /// Learning rate of the next step.
    pub fn lr(&self) -> f64 {
        let c = &self.cfg;
        lr_schedule(self.iter, c.lr, c.warmup_iters, c.total_iters, c.decay_power)
    }

    /// Parameters used for evaluation.
    pub fn eval_params(&self) -> &crate::model::ParamSet {
        if self.cfg.eval_teacher {
            &self.teacher.params
        } else {
            &self.student.params
        }
    }
}

thread_local! {
    static TEMPORAL_INPUTS: Cell<(usize, usize)> = const { Cell::new((0, 0)) };
}

/// `(source, target)` frame counts fed to the temporal head on this thread.
pub fn temporal_inputs_seen() -> (usize, usize) {
    TEMPORAL_INPUTS.with(Cell::get)
}

fn note_temporal_input(d: Domain) {
    TEMPORAL_INPUTS.with(|c| {
        let (s, t) = c.get();
        c.set(match d {
            Domain::Source => (s + 1, t),
            Domain::Target => (s, t + 1),
        });
    });
}

/// Training-split views of a dataset. Evaluation samples are never included.
pub struct TrainData<'a> {
    pub scenario: Scenario,
    pub source: Vec<&'a DomainSample>,
    pub target: Vec<&'a DomainSample>,
    /// Target clips for video; empty for static.
    pub clips: Vec<Vec<&'a DomainSample>>,
}

impl<'a> TrainData<'a> {
    pub fn new(ds: &'a Dataset, scenario: Scenario) -> Result<Self> {
        let source = ds.select(Domain::Source, Split::Train);
        let target = ds.select(Domain::Target, Split::Train);
        if source.is_empty() || target.is_empty() {
            return Err(Error::Config("training needs source and target training samples".into()));
        }
        let clips: Vec<Vec<&DomainSample>> = match scenario {
            Scenario::Static => Vec::new(),
            Scenario::Video => ds
                .clips(Domain::Target, Split::Train)
                .into_iter()
                .map(|c| c.frames)
                .collect(),
        };
        if scenario == Scenario::Video && clips.is_empty() {
            return Err(Error::Config("video training needs target clips".into()));
        }
        Ok(TrainData {
            scenario,
            source,
            target,
            clips,
        })
    }
}

struct Item<'a> {
    src: &'a DomainSample,
    src_rect: Rect,
    tgt: &'a DomainSample,
    tgt_rect: Rect,
    reference: Option<&'a DomainSample>,
}

fn random_rect<R: Rng + ?Sized>(s: &DomainSample, crop: usize, rng: &mut R) -> Result<Rect> {
    let (h, w) = (s.height(), s.width());
    if h < crop || w < crop {
        return Err(Error::Config(format!("crop {crop} exceeds image {w}x{h}")));
    }
    let x0 = rng.gen_range(0..=w - crop);
    let y0 = rng.gen_range(0..=h - crop);
    Rect::new(x0, y0, x0 + crop, y0 + crop)
}

fn draw_batch<'a>(data: &TrainData<'a>, cfg: &TrainConfig, iter: u64) -> Result<Vec<Item<'a>>> {
    let mut pick = derive(cfg.seed, Stream::Batch, &[iter]);
    let mut crop = derive(cfg.seed, Stream::Crop, &[iter]);
    let temporal = cfg.temporal_active();
    let mut items = Vec::with_capacity(cfg.batch_size);
    for b in 0..cfg.batch_size {
        let src = data.source[pick.gen_range(0..data.source.len())];
        let (tgt, reference) = match data.scenario {
            Scenario::Static => (data.target[pick.gen_range(0..data.target.len())], None),
            Scenario::Video => {
                let clip = &data.clips[pick.gen_range(0..data.clips.len())];
                let key = pick.gen_range(0..clip.len());
                let reference = if temporal {
                    let mut t = derive(cfg.seed, Stream::TemporalSampling, &[iter, b as u64]);
                    Some(clip[sample_reference_frame(key, clip.len(), cfg.temporal_range(), &mut t)?])
                } else {
                    None
                };
                (clip[key], reference)
            }
        };
        let src_rect = random_rect(src, cfg.crop, &mut crop)?;
        let tgt_rect = random_rect(tgt, cfg.crop, &mut crop)?;
        items.push(Item {
            src,
            src_rect,
            tgt,
            tgt_rect,
            reference,
        });
    }
    Ok(items)
}

fn crop_labels(s: &DomainSample, r: &Rect) -> Result<LabelMap> {
    let l = s
        .label()
        .ok_or_else(|| Error::invalid("train_step", format!("source sample {} has no label", s.id)))?;
    Ok(l.crop(r.x0, r.y0, r.width(), r.height()))
}

/// Grid labels of the mixed image with unkept cells set to the ignore index.
fn kept_grid(m: &Mixed) -> Vec<u16> {
    let (h, w) = (m.labels.h, m.labels.w);
    let mut out = Vec::with_capacity((h / STRIDE) * (w / STRIDE));
    for gy in 0..h / STRIDE {
        for gx in 0..w / STRIDE {
            let (x, y) = (gx * STRIDE + STRIDE / 2, gy * STRIDE + STRIDE / 2);
            out.push(if m.keep[y * w + x] { m.labels.get(x, y) } else { IGNORE_INDEX });
        }
    }
    out
}

struct StepOutput {
    report: LossReport,
    grads: Vec<Tensor>,
    /// Detached source pixel embeddings and their classes, for the bank.
    bank_rows: Vec<(usize, Vec<f64>)>,
}

fn forward_backward(state: &TrainState, data: &TrainData) -> Result<StepOutput> {
    let cfg = &state.cfg;
    let iter = state.iter;
    let contrast = cfg.contrast();
    let items = draw_batch(data, cfg, iter)?;
    let bsz = items.len();
    let crop = cfg.crop;

    let xs: Vec<Tensor> = items
        .iter()
        .map(|it| crop_image(&it.src.image, &it.src_rect))
        .collect::<Result<_>>()?;
    let ys: Vec<LabelMap> = items
        .iter()
        .map(|it| crop_labels(it.src, &it.src_rect))
        .collect::<Result<_>>()?;
    let xt: Vec<Tensor> = items
        .iter()
        .map(|it| crop_image(&it.tgt.image, &it.tgt_rect))
        .collect::<Result<_>>()?;

    let patch_on = cfg.patch_active();
    let pixel_on = cfg.pixel_active();
    let need_mixed = cfg.use_ce_target || (pixel_on && cfg.pixel_target_anchors);

    // Pseudo labels come from the teacher on the unmixed target crops.
    let mixed: Vec<Mixed> = if need_mixed {
        let pl = pseudo_label(&state.teacher.params, &stack_images(&xt.iter().collect::<Vec<_>>())?, cfg.threshold)?;
        let mut mix_rng = derive(cfg.seed, Stream::Mix, &[iter]);
        let mut photo_rng = derive(cfg.seed, Stream::Photometric, &[iter]);
        let mut out = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let (mut m, _) = classmix(&xs[b], &ys[b], &xt[b], &pl.labels[b], &pl.keep[b], &mut mix_rng)?;
            if cfg.photometric {
                m.image = photometric(&m.image, &mut photo_rng, &PhotometricParams::default());
            }
            out.push(m);
        }
        out
    } else {
        Vec::new()
    };

    let mut g = Graph::new();
    let p: Bound = state.student.bind(&mut g, true);
    let mut report = LossReport::default();

    let xs_v = g.constant(stack_images(&xs.iter().collect::<Vec<_>>())?);
    let fs = forward_features(&mut g, &p, xs_v)?;
    let zs = forward_cls(&mut g, &p, fs, (crop, crop))?;
    let ce_s = ce_source(&mut g, zs, &ys.iter().collect::<Vec<_>>())?;
    report.ce_source = g.value(ce_s).item();

    let fm = if mixed.is_empty() {
        None
    } else {
        let xm = g.constant(stack_images(&mixed.iter().map(|m| &m.image).collect::<Vec<_>>())?);
        Some(forward_features(&mut g, &p, xm)?)
    };
    let mut ce_t = None;
    if let (true, Some(fm)) = (cfg.use_ce_target, fm) {
        let zm = forward_cls(&mut g, &p, fm, (crop, crop))?;
        let keep: Vec<bool> = mixed.iter().flat_map(|m| m.keep.iter().copied()).collect();
        let v = ce_target_mixed(&mut g, zm, &mixed.iter().map(|m| &m.labels).collect::<Vec<_>>(), &keep)?;
        report.ce_target = g.value(v).item();
        ce_t = Some(v);
    }

    let mut pixel = None;
    let mut bank_rows = Vec::new();
    if pixel_on {
        let es = forward_head(&mut g, &p, fs, HeadKind::Pixel)?;
        let src_labels: Vec<u16> = ys.iter().flat_map(|l| labels_to_grid(l, STRIDE)).collect();
        let e = cfg.embed_dim;
        for (i, &l) in src_labels.iter().enumerate() {
            let row = &g.value(es.rows).data()[i * e..(i + 1) * e];
            // A dead head can emit an all-zero row, which has no direction to store.
            let unit = (row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9;
            if l != IGNORE_INDEX && unit {
                bank_rows.push((l as usize, row.to_vec()));
            }
        }
        let (rows, labels) = match (cfg.pixel_target_anchors, fm) {
            (true, Some(fm)) => {
                let et = forward_head(&mut g, &p, fm, HeadKind::Pixel)?;
                let rows = g.concat_rows(&[es.rows, et.rows])?;
                let mut labels = src_labels;
                labels.extend(mixed.iter().flat_map(kept_grid));
                (rows, labels)
            }
            _ => (es.rows, src_labels),
        };
        let mut rng = derive(cfg.seed, Stream::PixelSampling, &[iter]);
        let plan = plan_pixel_contrast(&labels, Some(&state.bank), &contrast, &mut rng);
        let out = pixel_contrast(&mut g, rows, &labels, &plan, &contrast)?;
        report.pixel = out.value;
        report.pixel_anchors = out.anchors;
        report.pixel_pairs = out.pairs;
        report.pixel_skipped = out.skipped;
        pixel = Some(out.loss);
    }

    let mut patch = None;
    if patch_on {
        let mut rng = derive(cfg.seed, Stream::PatchGeometry, &[iter]);
        let b = rng.gen_range(0..bsz);
        let img = &items[b].tgt.image;
        let spec = sample_patch_pair(img.shape()[2], img.shape()[1], &cfg.patch_sampler(), &mut rng)?;
        let resized = resize_image(img, spec.image_h, spec.image_w);
        let c1 = crop_image(&resized, &spec.rect1)?;
        let c2 = crop_image(&resized, &spec.rect2)?;
        let xp = g.constant(stack_images(&[&c1, &c2])?);
        let fp = forward_features(&mut g, &p, xp)?;
        let ep = forward_head(&mut g, &p, fp, HeadKind::Patch)?;
        let cells = ep.h * ep.w;
        let f1 = g.gather_rows(ep.rows, &(0..cells).collect::<Vec<_>>())?;
        let f2 = g.gather_rows(ep.rows, &(cells..2 * cells).collect::<Vec<_>>())?;
        let extra = match fm {
            Some(fm) if bsz > 1 => {
                let em = forward_head(&mut g, &p, fm, HeadKind::Patch)?;
                let per = em.h * em.w;
                let idx: Vec<usize> = (0..bsz).filter(|&o| o != b).flat_map(|o| o * per..(o + 1) * per).collect();
                Some(g.gather_rows(em.rows, &idx)?)
            }
            _ => None,
        };
        let out = patch_contrast(&mut g, f1, f2, &overlap_correspondence(&spec), extra, &contrast)?;
        report.patch = out.value;
        report.patch_pairs = out.pairs;
        patch = Some(out.loss);
    }

    let mut temporal = None;
    if cfg.temporal_active() {
        let mut frames = Vec::with_capacity(2 * bsz);
        for it in &items {
            note_temporal_input(it.tgt.domain);
            frames.push(crop_image(&it.tgt.image, &it.tgt_rect)?);
        }
        for it in &items {
            let r = it
                .reference
                .ok_or_else(|| Error::invalid("train_step", "missing reference frame"))?;
            note_temporal_input(r.domain);
            frames.push(crop_image(&r.image, &it.tgt_rect)?);
        }
        if items.iter().any(|it| it.tgt.domain != Domain::Target) {
            return Err(Error::invalid("train_step", "temporal contrast takes target frames only"));
        }
        let xv = g.constant(stack_images(&frames.iter().collect::<Vec<_>>())?);
        let fv = forward_features(&mut g, &p, xv)?;
        let ev = forward_head(&mut g, &p, fv, HeadKind::Temporal)?;
        let cells = ev.h * ev.w;
        let mut sum: Option<Var> = None;
        for b in 0..bsz {
            let k = g.gather_rows(ev.rows, &(b * cells..(b + 1) * cells).collect::<Vec<_>>())?;
            let r = g.gather_rows(ev.rows, &((bsz + b) * cells..(bsz + b + 1) * cells).collect::<Vec<_>>())?;
            let out = temporal_contrast(&mut g, k, r, &contrast)?;
            report.temporal_pairs += out.pairs;
            sum = Some(match sum {
                None => out.loss,
                Some(s) => g.add(s, out.loss)?,
            });
        }
        let mean = g.scale(sum.expect("batch is nonempty"), 1.0 / bsz as f64);
        report.temporal = g.value(mean).item();
        temporal = Some(mean);
    }

    let vars = LossVars {
        ce_source: ce_s,
        ce_target: ce_t,
        pixel,
        patch,
        temporal,
    };
    let total = total_loss(&mut g, &vars, &cfg.weights(), cfg.scenario)?;
    report.total = g.value(total).item();
    if !report.total.is_finite() {
        return Err(Error::NonFinite { op: "train_step", index: 0 });
    }
    g.backward(total)?;
    let grads = p.grads(&g);
    Ok(StepOutput {
        report,
        grads,
        bank_rows,
    })
}

/// Runs one step and commits it only if every stage succeeds.
pub fn train_step(state: &mut TrainState, data: &TrainData) -> Result<LossReport> {
    if data.scenario != state.cfg.scenario {
        return Err(Error::Config(format!(
            "data prepared for {} but config says {}",
            data.scenario.as_str(),
            state.cfg.scenario.as_str()
        )));
    }
    let StepOutput {
        report,
        mut grads,
        bank_rows,
    } = forward_backward(state, data)?;
    let cfg = &state.cfg;
    if cfg.grad_clip > 0.0 {
        clip_grad_norm(&mut grads, cfg.grad_clip);
    }
    let mut params = state.student.params.clone();
    let mut optim = state.optim.clone();
    optimizer_step(&mut params, &grads, &mut optim, state.lr(), cfg.weight_decay, &AdamW::default())?;
    let mut teacher = state.teacher.clone();
    ema_update(&mut teacher, &params, cfg.ema_m)?;
    let mut bank = state.bank.clone();
    for (class, row) in &bank_rows {
        bank.push(*class, row)?;
    }
    state.student.params = params;
    state.optim = optim;
    state.teacher = teacher;
    state.bank = bank;
    state.iter += 1;
    Ok(report)
}

pub fn train_step_static(state: &mut TrainState, data: &TrainData) -> Result<LossReport> {
    if state.cfg.scenario != Scenario::Static {
        return Err(Error::Config("train_step_static needs scenario = static".into()));
    }
    train_step(state, data)
}

pub fn train_step_video(state: &mut TrainState, data: &TrainData) -> Result<LossReport> {
    if state.cfg.scenario != Scenario::Video {
        return Err(Error::Config("train_step_video needs scenario = video".into()));
    }
    train_step(state, data)
}

/// Header of the metrics stream.
pub const METRICS_HEADER: &str = "iter,lr,ce_s,ce_t,pixel,patch,temporal,total";

/// One metrics line. Values print in shortest round-trip form, so equal
/// lines mean bit-equal values.
pub fn metrics_line(iter: u64, lr: f64, r: &LossReport) -> String {
    format!(
        "{iter},{lr},{},{},{},{},{},{}",
        r.ce_source, r.ce_target, r.pixel, r.patch, r.temporal, r.total
    )
}

/// Steps until `state.iter == until`, calling `on_step(state, lr, report)`
/// after each committed step.
pub fn train_until(
    state: &mut TrainState,
    data: &TrainData,
    until: u64,
    mut on_step: impl FnMut(&TrainState, f64, &LossReport) -> Result<()>,
) -> Result<()> {
    while state.iter < until {
        let lr = state.lr();
        let report = train_step(state, data)?;
        on_step(state, lr, &report)?;
    }
    Ok(())
}
