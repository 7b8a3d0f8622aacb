//! Confusion-count segmentation metrics.

use std::fmt::Write;

use crate::data::{DomainSample, LabelMap, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::{predict_logits, softmax_argmax, stack_images, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub iter: u64,
}

impl EvalReport {
    /// Machine-readable block: a header line, one `class,iou,tp,fp,fn` row
    /// per class and a closing `miou` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# eval iter={}\nclass,iou,tp,fp,fn\n", self.iter);
        for c in 0..self.tp.len() {
            let iou = self.per_class_iou[c].map_or("nan".to_string(), |v| v.to_string());
            writeln!(s, "{c},{iou},{},{},{}", self.tp[c], self.fp[c], self.fn_[c]).unwrap();
        }
        writeln!(s, "miou,{}", self.miou).unwrap();
        s
    }

    /// Human-readable table with IoU in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::from("class   IoU\n");
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(s, "{c:>5} {:>6.2}", 100.0 * v).unwrap(),
                None => writeln!(s, "{c:>5}      -").unwrap(),
            }
        }
        writeln!(s, " mIoU {:>6.2}", 100.0 * self.miou).unwrap();
        s
    }
}

/// Accumulates confusion counts over all non-ignored pixels.
#[derive(Clone, Debug)]
pub struct Confusion {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::invalid(
                "evaluate",
                format!("prediction {}x{} vs label {}x{}", pred.h, pred.w, gt.h, gt.w),
            ));
        }
        let c = self.tp.len();
        for (&p, &t) in pred.data().iter().zip(gt.data()) {
            if t == IGNORE_INDEX {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= c || t >= c {
                return Err(Error::IndexOutOfRange {
                    op: "evaluate",
                    index: p.max(t),
                    extent: c,
                });
            }
            if p == t {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self, iter: u64) -> EvalReport {
        let per_class_iou: Vec<Option<f64>> = (0..self.tp.len())
            .map(|c| {
                let denom = self.tp[c] + self.fp[c] + self.fn_[c];
                (denom > 0).then(|| self.tp[c] as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        EvalReport {
            per_class_iou,
            miou,
            tp: self.tp.clone(),
            fp: self.fp.clone(),
            fn_: self.fn_.clone(),
            iter,
        }
    }
}

pub fn evaluate_labels(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize, iter: u64) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} predictions for {} labels", preds.len(), gts.len()),
        ));
    }
    let mut conf = Confusion::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        conf.add(p, g)?;
    }
    Ok(conf.report(iter))
}

/// Argmax predictions of a network over full-size images.
pub fn predict(params: &ParamSet, samples: &[&DomainSample], batch: usize) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let logits = predict_logits(params, &stack_images(&imgs)?)?;
        out.extend(softmax_argmax(&logits).into_iter().map(|(l, _)| l));
    }
    Ok(out)
}

/// Segments every labeled sample and scores it against its ground truth.
pub fn evaluate(
    params: &ParamSet,
    samples: &[&DomainSample],
    num_classes: usize,
    iter: u64,
) -> Result<EvalReport> {
    let preds = predict(params, samples, 8)?;
    let mut conf = Confusion::new(num_classes);
    for (p, s) in preds.iter().zip(samples) {
        let gt = s
            .label()
            .ok_or_else(|| Error::invalid("evaluate", format!("sample {} has no label", s.id)))?;
        conf.add(p, gt)?;
    }
    Ok(conf.report(iter))
}
