//! Segmentation and contrastive objectives.
//!
//! Every contrast term has the InfoNCE form
//! `-log( r(a, p) / sum_k r(a, k) )` with `r(u, v) = exp(<u, v> / tau)`,
//! where `k` ranges over the candidate pool minus the anchor itself and
//! always includes the positive `p`. Terms are therefore nonnegative.

use rand::seq::index;
use rand::Rng;

use crate::bank::FeatureBank;
use crate::data::{LabelMap, IGNORE_INDEX};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContrastConfig {
    pub tau: f64,
    pub max_anchors_per_class: usize,
    /// Cap on in-image pool entries per step (anchors included).
    pub negatives_per_anchor: usize,
    /// Bank vectors drawn per class per step.
    pub bank_per_class: usize,
    pub normalize_by_pairs: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.1,
            max_anchors_per_class: 64,
            negatives_per_anchor: 256,
            bank_per_class: 64,
            normalize_by_pairs: true,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.max_anchors_per_class == 0 || self.negatives_per_anchor == 0 {
            return Err(Error::Config("anchor and pool caps must be positive".into()));
        }
        Ok(())
    }
}

/// `exp(<a, b> / tau)` for unit vectors.
pub fn exp_cos_sim(a: &[f64], b: &[f64], tau: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / tau).exp()
}

fn ce_targets(labels: &[&LabelMap]) -> Vec<usize> {
    labels
        .iter()
        .flat_map(|l| l.targets(IGNORE_INDEX as usize))
        .collect()
}

/// Mean pixel cross-entropy of `[B, C, H, W]` logits against `B` label maps.
pub fn ce_source(g: &mut Graph, logits: Var, labels: &[&LabelMap]) -> Result<Var> {
    let rows = g.nchw_to_rows(logits)?;
    g.softmax_ce(rows, &ce_targets(labels), IGNORE_INDEX as usize, None)
}

/// Cross-entropy on mixed images restricted to `keep` (one flag per pixel,
/// batch-major). Zero when nothing is kept.
pub fn ce_target_mixed(g: &mut Graph, logits: Var, labels: &[&LabelMap], keep: &[bool]) -> Result<Var> {
    let rows = g.nchw_to_rows(logits)?;
    g.softmax_ce(rows, &ce_targets(labels), IGNORE_INDEX as usize, Some(keep))
}

/// Result of one contrast term.
#[derive(Clone, Copy, Debug)]
pub struct ContrastOutcome {
    pub loss: Var,
    pub value: f64,
    pub anchors: usize,
    pub pairs: usize,
    /// Anchors dropped for lack of any positive.
    pub skipped: usize,
}

/// InfoNCE over `anchors x pool`. `self_cols[r]` is the anchor's own pool
/// column, which is removed from its candidates.
fn info_nce(
    g: &mut Graph,
    anchors: Var,
    pool: Var,
    self_cols: &[Option<usize>],
    positives: &[(usize, usize)],
    cfg: &ContrastConfig,
) -> Result<Var> {
    cfg.validate()?;
    if positives.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let pt = g.transpose(pool)?;
    let sim = g.matmul(anchors, pt)?;
    let sim = g.scale(sim, 1.0 / cfg.tau);
    let (rows, cols) = (g.shape(sim)[0], g.shape(sim)[1]);
    let mut mask = vec![true; rows * cols];
    for (r, c) in self_cols.iter().enumerate() {
        if let Some(c) = c {
            mask[r * cols + c] = false;
        }
    }
    let loss = g.row_info_nce(sim, &mask, positives)?;
    Ok(if cfg.normalize_by_pairs {
        g.scale(loss, 1.0 / positives.len() as f64)
    } else {
        loss
    })
}

fn outcome(g: &Graph, loss: Var, anchors: usize, pairs: usize, skipped: usize) -> ContrastOutcome {
    ContrastOutcome {
        loss,
        value: g.value(loss).item(),
        anchors,
        pairs,
        skipped,
    }
}

/// Anchor and candidate selection for one pixel-contrast evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelPlan {
    /// Embedding rows used as anchors; they also open `pool_rows`.
    pub anchors: Vec<usize>,
    /// In-image candidate rows, `anchors` first.
    pub pool_rows: Vec<usize>,
    /// Bank candidates, flat, one embedding per label.
    pub bank_rows: Vec<f64>,
    pub bank_labels: Vec<u16>,
}

/// Samples anchors uniformly within each present class, tops the pool up
/// with other labeled rows, and draws bank vectors for every class.
pub fn plan_pixel_contrast<R: Rng + ?Sized>(
    labels: &[u16],
    bank: Option<&FeatureBank>,
    cfg: &ContrastConfig,
    rng: &mut R,
) -> PixelPlan {
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_INDEX {
            continue;
        }
        let l = l as usize;
        if by_class.len() <= l {
            by_class.resize(l + 1, Vec::new());
        }
        by_class[l].push(i);
    }
    let mut anchors = Vec::new();
    for rows in &by_class {
        let k = rows.len().min(cfg.max_anchors_per_class);
        if k == 0 {
            continue;
        }
        let mut picked: Vec<usize> = index::sample(rng, rows.len(), k)
            .into_iter()
            .map(|i| rows[i])
            .collect();
        picked.sort_unstable();
        anchors.extend(picked);
    }
    let mut pool_rows = anchors.clone();
    let mut is_anchor = vec![false; labels.len()];
    for &a in &anchors {
        is_anchor[a] = true;
    }
    let rest: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != IGNORE_INDEX && !is_anchor[i])
        .collect();
    let room = cfg.negatives_per_anchor.saturating_sub(anchors.len()).min(rest.len());
    if room > 0 {
        let mut extra: Vec<usize> = index::sample(rng, rest.len(), room)
            .into_iter()
            .map(|i| rest[i])
            .collect();
        extra.sort_unstable();
        pool_rows.extend(extra);
    }
    let mut bank_rows = Vec::new();
    let mut bank_labels = Vec::new();
    if let Some(bank) = bank {
        for c in 0..bank.num_classes() {
            for v in bank.sample(c, cfg.bank_per_class, rng) {
                bank_rows.extend_from_slice(v);
                bank_labels.push(c as u16);
            }
        }
    }
    PixelPlan {
        anchors,
        pool_rows,
        bank_rows,
        bank_labels,
    }
}

/// Pixel-wise contrast over embedding rows `[N, E]` with per-row classes.
/// Positives are same-class pool entries other than the anchor; bank
/// entries are constants and receive no gradient.
pub fn pixel_contrast(
    g: &mut Graph,
    emb: Var,
    labels: &[u16],
    plan: &PixelPlan,
    cfg: &ContrastConfig,
) -> Result<ContrastOutcome> {
    let s = g.shape(emb).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "pixel_contrast",
            left: s,
            right: vec![labels.len()],
        });
    }
    let e = s[1];
    if plan.anchors.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok(outcome(g, zero, 0, 0, 0));
    }
    if plan.pool_rows.get(..plan.anchors.len()) != Some(&plan.anchors[..]) {
        return Err(Error::invalid("pixel_contrast", "pool must start with the anchors"));
    }
    if plan.bank_rows.len() != plan.bank_labels.len() * e {
        return Err(Error::invalid(
            "pixel_contrast",
            format!("bank rows do not match embedding dim {e}"),
        ));
    }
    let pool_labels: Vec<u16> = plan
        .pool_rows
        .iter()
        .map(|&r| labels[r])
        .chain(plan.bank_labels.iter().copied())
        .collect();
    let mut positives = Vec::new();
    let mut skipped = 0;
    for (a, &row) in plan.anchors.iter().enumerate() {
        let before = positives.len();
        for (k, &l) in pool_labels.iter().enumerate() {
            if k != a && l == labels[row] {
                positives.push((a, k));
            }
        }
        if positives.len() == before {
            skipped += 1;
        }
    }
    let anchors = g.gather_rows(emb, &plan.anchors)?;
    let mut pool = g.gather_rows(emb, &plan.pool_rows)?;
    if !plan.bank_labels.is_empty() {
        let bank = g.constant(Tensor::new(&[plan.bank_labels.len(), e], plan.bank_rows.clone())?);
        pool = g.concat_rows(&[pool, bank])?;
    }
    let self_cols: Vec<Option<usize>> = (0..plan.anchors.len()).map(Some).collect();
    let loss = info_nce(g, anchors, pool, &self_cols, &positives, cfg)?;
    Ok(outcome(g, loss, plan.anchors.len(), positives.len(), skipped))
}

/// Patch-wise contrast between the feature grids of two overlapping crops.
///
/// For each `(i, j)` the anchor is `f1[i]` and the positive `f2[j]`; the
/// candidates are every row of `f1`, `f2` and `extra` except the anchor.
pub fn patch_contrast(
    g: &mut Graph,
    f1: Var,
    f2: Var,
    pairs: &[(usize, usize)],
    extra: Option<Var>,
    cfg: &ContrastConfig,
) -> Result<ContrastOutcome> {
    if pairs.is_empty() {
        return Err(Error::invalid("patch_contrast", "empty overlap"));
    }
    let (s1, s2) = (g.shape(f1).to_vec(), g.shape(f2).to_vec());
    if s1 != s2 || s1.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "patch_contrast",
            left: s1,
            right: s2,
        });
    }
    let n = s1[0];
    let mut parts = vec![f1, f2];
    parts.extend(extra);
    let pool = g.concat_rows(&parts)?;
    let idx: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let anchors = g.gather_rows(f1, &idx)?;
    let self_cols: Vec<Option<usize>> = idx.iter().map(|&i| Some(i)).collect();
    let positives: Vec<(usize, usize)> = pairs
        .iter()
        .enumerate()
        .map(|(r, &(_, j))| {
            if j >= n {
                Err(Error::IndexOutOfRange {
                    op: "patch_contrast",
                    index: j,
                    extent: n,
                })
            } else {
                Ok((r, n + j))
            }
        })
        .collect::<Result<_>>()?;
    let loss = info_nce(g, anchors, pool, &self_cols, &positives, cfg)?;
    Ok(outcome(g, loss, pairs.len(), positives.len(), 0))
}

/// Temporal contrast between same-rectangle grids of a key and a reference
/// frame: `key[i]` is pulled towards `reference[i]` and pushed from every
/// other reference location.
pub fn temporal_contrast(
    g: &mut Graph,
    key: Var,
    reference: Var,
    cfg: &ContrastConfig,
) -> Result<ContrastOutcome> {
    let (sk, sr) = (g.shape(key).to_vec(), g.shape(reference).to_vec());
    if sk != sr || sk.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "temporal_contrast",
            left: sk,
            right: sr,
        });
    }
    let n = sk[0];
    let positives: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let loss = info_nce(g, key, reference, &vec![None; n], &positives, cfg)?;
    Ok(outcome(g, loss, n, n, 0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Scenario {
    #[default]
    Static,
    Video,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Static => "static",
            Scenario::Video => "video",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
        }
    }
}

/// Graph handles of the individual terms; absent terms contribute nothing.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ce_source: Var,
    pub ce_target: Option<Var>,
    pub pixel: Option<Var>,
    pub patch: Option<Var>,
    pub temporal: Option<Var>,
}

/// `ce_s + ce_t + alpha*pixel + beta*patch + gamma*temporal`; the temporal
/// term is dropped in the static scenario.
pub fn total_loss(g: &mut Graph, v: &LossVars, w: &LossWeights, scenario: Scenario) -> Result<Var> {
    let mut total = v.ce_source;
    if let Some(t) = v.ce_target {
        total = g.add(total, t)?;
    }
    let temporal = if scenario == Scenario::Video { v.temporal } else { None };
    for (term, weight) in [(v.pixel, w.alpha), (v.patch, w.beta), (temporal, w.gamma)] {
        if let Some(t) = term {
            let t = g.scale(t, weight);
            total = g.add(total, t)?;
        }
    }
    Ok(total)
}

/// Scalar values of one step's objective and its bookkeeping counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub ce_source: f64,
    pub ce_target: f64,
    pub pixel: f64,
    pub patch: f64,
    pub temporal: f64,
    pub total: f64,
    pub pixel_anchors: usize,
    pub pixel_pairs: usize,
    pub pixel_skipped: usize,
    pub patch_pairs: usize,
    pub temporal_pairs: usize,
}

impl LossReport {
    /// Total recomputed from the components in the same order as [`total_loss`].
    pub fn combine(&self, w: &LossWeights, scenario: Scenario) -> f64 {
        let mut t = self.ce_source + self.ce_target;
        t += w.alpha * self.pixel;
        t += w.beta * self.patch;
        if scenario == Scenario::Video {
            t += w.gamma * self.temporal;
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::grad_check;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, e: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * e);
        for _ in 0..n {
            let v: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            out.extend(v.iter().map(|x| x / norm));
        }
        out
    }

    fn row(data: &[f64], e: usize, i: usize) -> &[f64] {
        &data[i * e..(i + 1) * e]
    }

    /// Literal evaluation: for each (anchor, positive) pair,
    /// `-ln(r(a, p) / sum_{k != self} r(a, k))`.
    fn literal(
        anchors: &[&[f64]],
        pool: &[&[f64]],
        self_cols: &[Option<usize>],
        pos: &[(usize, usize)],
        tau: f64,
        normalize: bool,
    ) -> f64 {
        let mut total = 0.0;
        for &(a, p) in pos {
            let num = exp_cos_sim(anchors[a], pool[p], tau);
            let mut den = 0.0;
            for (k, v) in pool.iter().enumerate() {
                if Some(k) != self_cols[a] {
                    den += exp_cos_sim(anchors[a], v, tau);
                }
            }
            total += -(num / den).ln();
        }
        if normalize && !pos.is_empty() {
            total / pos.len() as f64
        } else {
            total
        }
    }

    #[test]
    fn exp_cos_sim_examples() {
        assert!((exp_cos_sim(&[1.0, 0.0], &[1.0, 0.0], 0.1) - 22026.465794806718).abs() < 1e-9);
        assert_eq!(exp_cos_sim(&[1.0, 0.0], &[0.0, 1.0], 0.1), 1.0);
        assert!((exp_cos_sim(&[1.0, 0.0], &[-1.0, 0.0], 0.5) - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn ce_uniform_and_saturated() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let l = LabelMap::new(2, 2, vec![0, 1, 2, IGNORE_INDEX]).unwrap();
        let v = ce_source(&mut g, logits, &[&l]).unwrap();
        assert!((g.value(v).item() - 3f64.ln()).abs() < 1e-15);

        let mut data = vec![0.0; 8];
        data[0] = 100.0;
        data[4 + 1] = 100.0;
        let logits = g.constant(Tensor::new(&[1, 2, 2, 2], data).unwrap());
        let l = LabelMap::new(2, 2, vec![0, IGNORE_INDEX, 0, 0]).unwrap();
        let v = ce_source(&mut g, logits, &[&l]).unwrap();
        // Pixel 0 is saturated correct; pixels 2 and 3 are uniform.
        let expect = (0.0 + 2.0 * 2f64.ln()) / 3.0;
        assert!((g.value(v).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, h, w) = (3, 4, 4);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels: Vec<u16> = (0..h * w).map(|_| rng.gen_range(0..c as u16)).collect();
        let keep: Vec<bool> = (0..h * w).map(|i| i % 2 == 0).collect();
        let lm = LabelMap::new(h, w, labels.clone()).unwrap();
        let oracle = |mask: &dyn Fn(usize) -> bool| {
            let (mut s, mut n) = (0.0, 0.0);
            for p in 0..h * w {
                if !mask(p) {
                    continue;
                }
                let z: Vec<f64> = (0..c).map(|k| data[k * h * w + p]).collect();
                let den: f64 = z.iter().map(|v| v.exp()).sum();
                s -= (z[labels[p] as usize].exp() / den).ln();
                n += 1.0;
            }
            s / n
        };
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(&[1, c, h, w], data.clone()).unwrap());
        let full = ce_source(&mut g, logits, &[&lm]).unwrap();
        assert!((g.value(full).item() - oracle(&|_| true)).abs() < 1e-10);
        let half = ce_target_mixed(&mut g, logits, &[&lm], &keep).unwrap();
        assert!((g.value(half).item() - oracle(&|p| keep[p])).abs() < 1e-10);
        let all = ce_target_mixed(&mut g, logits, &[&lm], &vec![true; h * w]).unwrap();
        assert_eq!(g.value(all).item(), g.value(full).item());
        let none = ce_target_mixed(&mut g, logits, &[&lm], &vec![false; h * w]).unwrap();
        assert_eq!(g.value(none).item(), 0.0);
    }

    fn plan_all(labels: &[u16]) -> PixelPlan {
        let anchors: Vec<usize> = (0..labels.len()).collect();
        PixelPlan {
            pool_rows: anchors.clone(),
            anchors,
            ..PixelPlan::default()
        }
    }

    #[test]
    fn single_positive_no_negative_is_zero() {
        let cfg = ContrastConfig::default();
        let mut g = Graph::new();
        let emb = g.param(Tensor::new(&[2, 2], vec![0.6, 0.8, 1.0, 0.0]).unwrap());
        let labels = [1, 1];
        let plan = PixelPlan {
            anchors: vec![0],
            pool_rows: vec![0, 1],
            ..PixelPlan::default()
        };
        let out = pixel_contrast(&mut g, emb, &labels, &plan, &cfg).unwrap();
        assert_eq!(out.value, 0.0);

        let f = g.param(Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap());
        let out = temporal_contrast(&mut g, f, f, &cfg).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn pixel_contrast_three_embeddings() {
        let cfg = ContrastConfig::default();
        let s = 0.5f64.sqrt();
        let data = vec![1.0, 0.0, s, s, 0.0, 1.0];
        let labels = [0u16, 0, 1];
        let mut g = Graph::new();
        let emb = g.param(Tensor::new(&[3, 2], data.clone()).unwrap());
        let out = pixel_contrast(&mut g, emb, &labels, &plan_all(&labels), &cfg).unwrap();
        // Anchors 0 and 1 each have one positive; anchor 2 has none.
        assert_eq!((out.pairs, out.skipped), (2, 1));
        let r = |i: usize, j: usize| exp_cos_sim(row(&data, 2, i), row(&data, 2, j), 0.1);
        let t0 = -(r(0, 1) / (r(0, 1) + r(0, 2))).ln();
        let t1 = -(r(1, 0) / (r(1, 0) + r(1, 2))).ln();
        let expect = (t0 + t1) / 2.0;
        assert!((out.value - expect).abs() <= 1e-9 * expect);
    }

    #[test]
    fn random_pixel_contrast_matches_literal_loop() {
        let cfg = ContrastConfig {
            max_anchors_per_class: 3,
            negatives_per_anchor: 10,
            bank_per_class: 2,
            ..ContrastConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (n, e) = (14, 5);
            let data = unit_rows(&mut rng, n, e);
            let labels: Vec<u16> = (0..n)
                .map(|_| if rng.gen_bool(0.1) { IGNORE_INDEX } else { rng.gen_range(0..3) })
                .collect();
            let mut bank = FeatureBank::new(3, e, 8).unwrap();
            for c in 0..3 {
                bank.push(c, &unit_rows(&mut rng, 3, e)).unwrap();
            }
            let plan = plan_pixel_contrast(&labels, Some(&bank), &cfg, &mut rng);
            let mut g = Graph::new();
            let emb = g.param(Tensor::new(&[n, e], data.clone()).unwrap());
            let out = pixel_contrast(&mut g, emb, &labels, &plan, &cfg).unwrap();

            let anchors: Vec<&[f64]> = plan.anchors.iter().map(|&i| row(&data, e, i)).collect();
            let mut pool: Vec<&[f64]> = plan.pool_rows.iter().map(|&i| row(&data, e, i)).collect();
            let mut pool_labels: Vec<u16> = plan.pool_rows.iter().map(|&i| labels[i]).collect();
            for (k, &l) in plan.bank_labels.iter().enumerate() {
                pool.push(row(&plan.bank_rows, e, k));
                pool_labels.push(l);
            }
            let mut pos = Vec::new();
            for (a, &ai) in plan.anchors.iter().enumerate() {
                for (k, &l) in pool_labels.iter().enumerate() {
                    if k != a && l == labels[ai] {
                        pos.push((a, k));
                    }
                }
            }
            let self_cols: Vec<_> = (0..anchors.len()).map(Some).collect();
            let expect = literal(&anchors, &pool, &self_cols, &pos, cfg.tau, true);
            assert!((out.value - expect).abs() <= 1e-9 * expect.abs().max(1e-300), "{} vs {expect}", out.value);
        }
    }

    #[test]
    fn plan_respects_caps_and_classes() {
        let cfg = ContrastConfig {
            max_anchors_per_class: 2,
            negatives_per_anchor: 5,
            ..ContrastConfig::default()
        };
        let labels = [0u16, 0, 0, 1, 1, IGNORE_INDEX, 2, 0, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = plan_pixel_contrast(&labels, None, &cfg, &mut rng);
        let mut per = [0; 3];
        for &a in &plan.anchors {
            per[labels[a] as usize] += 1;
        }
        assert_eq!(per, [2, 2, 1]);
        assert_eq!(plan.pool_rows.len(), 5);
        assert!(plan.pool_rows.iter().all(|&r| labels[r] != IGNORE_INDEX));
        assert_eq!(&plan.pool_rows[..5], &plan.anchors[..]);
    }

    #[test]
    fn pool_permutation_leaves_loss_unchanged() {
        let cfg = ContrastConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, e) = (9, 4);
        let data = unit_rows(&mut rng, n, e);
        let labels = [0u16, 1, 0, 2, 1, 0, 2, 2, 1];
        let mut plan = plan_all(&labels);
        plan.anchors = vec![0, 1];
        plan.pool_rows = vec![0, 1, 2, 3, 4, 5, 6, 7, 8];
        let mut g = Graph::new();
        let emb = g.param(Tensor::new(&[n, e], data).unwrap());
        let a = pixel_contrast(&mut g, emb, &labels, &plan, &cfg).unwrap().value;
        plan.pool_rows = vec![0, 1, 8, 5, 7, 2, 6, 4, 3];
        let b = pixel_contrast(&mut g, emb, &labels, &plan, &cfg).unwrap().value;
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn bank_entries_get_no_gradient_and_pixel_grad_checks() {
        let cfg = ContrastConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, e) = (8, 4);
        let raw: Vec<f64> = (0..n * e).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [0u16, 1, 0, 1, 2, 2, 0, 1];
        let mut bank = FeatureBank::new(3, e, 4).unwrap();
        for c in 0..3 {
            bank.push(c, &unit_rows(&mut rng, 2, e)).unwrap();
        }
        let plan = plan_pixel_contrast(&labels, Some(&bank), &cfg, &mut rng);
        assert!(!plan.bank_labels.is_empty());
        let f = |g: &mut Graph, x: &[Var]| {
            let u = g.normalize_rows(x[0])?;
            Ok(pixel_contrast(g, u, &labels, &plan, &cfg)?.loss)
        };
        let rep = grad_check(&f, &[Tensor::new(&[n, e], raw.clone()).unwrap()], 1e-4, 1e-4).unwrap();
        assert!(rep.passed(), "{rep:?}");

        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[n, e], raw).unwrap());
        let u = g.normalize_rows(x).unwrap();
        let out = pixel_contrast(&mut g, u, &labels, &plan, &cfg).unwrap();
        g.backward(out.loss).unwrap();
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn patch_contrast_closed_form() {
        // Identical crops, one-hot grid, orthogonal extra negatives.
        let cfg = ContrastConfig::default();
        let e = 6;
        let grid: Vec<f64> = (0..2).flat_map(|i| (0..e).map(move |k| (k == i) as u8 as f64)).collect();
        let extra: Vec<f64> = (0..3).flat_map(|i| (0..e).map(move |k| (k == i + 2) as u8 as f64)).collect();
        let mut g = Graph::new();
        let f1 = g.param(Tensor::new(&[2, e], grid.clone()).unwrap());
        let f2 = g.param(Tensor::new(&[2, e], grid).unwrap());
        let x = g.constant(Tensor::new(&[3, e], extra).unwrap());
        let out = patch_contrast(&mut g, f1, f2, &[(0, 0), (1, 1)], Some(x), &cfg).unwrap();
        // Candidates per anchor: positive e^{10}, one orthogonal f1 row, one
        // orthogonal f2 row and three orthogonal extras.
        let n = 5.0;
        let expect = -(10f64.exp() / (10f64.exp() + n)).ln();
        assert!((out.value - expect).abs() <= 1e-12 * expect);
        assert!(out.value > 0.0);

        let one = g.param(Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap());
        let zero = patch_contrast(&mut g, one, one, &[(0, 0)], None, &cfg).unwrap();
        assert_eq!(zero.value, 0.0);
        assert!(patch_contrast(&mut g, one, one, &[], None, &cfg).is_err());
    }

    #[test]
    fn random_patch_and_temporal_match_literal_loop() {
        let cfg = ContrastConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let (n, e, x) = (16, 6, 5);
            let d1 = unit_rows(&mut rng, n, e);
            let d2 = unit_rows(&mut rng, n, e);
            let dx = unit_rows(&mut rng, x, e);
            let pairs: Vec<(usize, usize)> = (0..4).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
            let mut g = Graph::new();
            let f1 = g.param(Tensor::new(&[n, e], d1.clone()).unwrap());
            let f2 = g.param(Tensor::new(&[n, e], d2.clone()).unwrap());
            let fx = g.param(Tensor::new(&[x, e], dx.clone()).unwrap());
            let got = patch_contrast(&mut g, f1, f2, &pairs, Some(fx), &cfg).unwrap().value;
            let anchors: Vec<&[f64]> = pairs.iter().map(|&(i, _)| row(&d1, e, i)).collect();
            let pool: Vec<&[f64]> = (0..n)
                .map(|i| row(&d1, e, i))
                .chain((0..n).map(|i| row(&d2, e, i)))
                .chain((0..x).map(|i| row(&dx, e, i)))
                .collect();
            let self_cols: Vec<_> = pairs.iter().map(|&(i, _)| Some(i)).collect();
            let pos: Vec<_> = pairs.iter().enumerate().map(|(r, &(_, j))| (r, n + j)).collect();
            let expect = literal(&anchors, &pool, &self_cols, &pos, cfg.tau, true);
            assert!((got - expect).abs() <= 1e-9 * expect);

            let m = 9;
            let k = g_param(&mut g, &d1[..m * e], m, e);
            let r = g_param(&mut g, &d2[..m * e], m, e);
            let got = temporal_contrast(&mut g, k, r, &cfg).unwrap().value;
            let anchors: Vec<&[f64]> = (0..m).map(|i| row(&d1, e, i)).collect();
            let pool: Vec<&[f64]> = (0..m).map(|i| row(&d2, e, i)).collect();
            let pos: Vec<_> = (0..m).map(|i| (i, i)).collect();
            let expect = literal(&anchors, &pool, &vec![None; m], &pos, cfg.tau, true);
            assert!((got - expect).abs() <= 1e-9 * expect);
        }
    }

    fn g_param(g: &mut Graph, d: &[f64], n: usize, e: usize) -> Var {
        g.param(Tensor::new(&[n, e], d.to_vec()).unwrap())
    }

    #[test]
    fn contrast_gradients_check() {
        let cfg = ContrastConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = |rng: &mut ChaCha8Rng, n: usize| {
            Tensor::from_fn(&[n, 4], |_| rng.gen_range(-1.0..1.0))
        };
        let inputs = [raw(&mut rng, 9), raw(&mut rng, 9), raw(&mut rng, 3)];
        let pairs = [(4, 0), (5, 1), (7, 3), (8, 4)];
        let patch = |g: &mut Graph, x: &[Var]| {
            let u: Vec<Var> = x.iter().map(|&v| g.normalize_rows(v)).collect::<Result<_>>()?;
            Ok(patch_contrast(g, u[0], u[1], &pairs, Some(u[2]), &cfg)?.loss)
        };
        let rep = grad_check(&patch, &inputs, 1e-4, 1e-4).unwrap();
        assert!(rep.passed(), "{rep:?}");
        let temporal = |g: &mut Graph, x: &[Var]| {
            let a = g.normalize_rows(x[0])?;
            let b = g.normalize_rows(x[1])?;
            Ok(temporal_contrast(g, a, b, &cfg)?.loss)
        };
        let rep = grad_check(&temporal, &inputs[..2], 1e-4, 1e-4).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn total_loss_weights_and_scenarios() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let vars = LossVars {
            ce_source: one,
            ce_target: Some(one),
            pixel: Some(one),
            patch: Some(one),
            temporal: Some(one),
        };
        let t = total_loss(&mut g, &vars, &w, Scenario::Video).unwrap();
        assert!((g.value(t).item() - 2.3).abs() < 1e-12);
        let t = total_loss(&mut g, &vars, &w, Scenario::Static).unwrap();
        assert!((g.value(t).item() - 2.2).abs() < 1e-12);
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
        };
        let t = total_loss(&mut g, &vars, &zero, Scenario::Video).unwrap();
        assert_eq!(g.value(t).item(), 2.0);

        let rep = LossReport {
            ce_source: 1.0,
            ce_target: 1.0,
            pixel: 1.0,
            patch: 1.0,
            temporal: 1.0,
            ..LossReport::default()
        };
        assert_eq!(rep.combine(&w, Scenario::Video), g_value(&w));
    }

    fn g_value(w: &LossWeights) -> f64 {
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let vars = LossVars {
            ce_source: one,
            ce_target: Some(one),
            pixel: Some(one),
            patch: Some(one),
            temporal: Some(one),
        };
        let t = total_loss(&mut g, &vars, w, Scenario::Video).unwrap();
        g.value(t).item()
    }

    #[test]
    fn doubling_tau_keeps_similarity_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = unit_rows(&mut rng, 6, 4);
        let a = row(&d, 4, 0);
        let rank = |tau: f64| {
            let mut idx: Vec<usize> = (1..6).collect();
            idx.sort_by(|&i, &j| {
                exp_cos_sim(a, row(&d, 4, i), tau)
                    .partial_cmp(&exp_cos_sim(a, row(&d, 4, j), tau))
                    .unwrap()
            });
            idx
        };
        assert_eq!(rank(0.1), rank(0.2));
    }
}
