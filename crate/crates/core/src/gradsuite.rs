//! Finite-difference gradient suite over every differentiable op, every loss
//! term and the full network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bank::FeatureBank;
use crate::data::LabelMap;
use crate::diffcore::{grad_check, GradCheckReport, Graph, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    ce_source, ce_target_mixed, patch_contrast, pixel_contrast, plan_pixel_contrast, temporal_contrast, total_loss,
    ContrastConfig, LossVars, LossWeights, Scenario,
};
use crate::model::{forward_cls, forward_features, forward_head, Bound, HeadKind, ModelConfig, SegNet};

pub const SUITE_EPS: f64 = 1e-4;
pub const SUITE_TOL: f64 = 1e-4;

/// Minimum distance of any relu input from its kink in the network case.
/// Each probe moves one scalar by `SUITE_EPS`, shifting downstream relu
/// inputs by at most a few times that.
const KINK_MARGIN: f64 = 100.0 * SUITE_EPS;

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Fun = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn rnd(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, -1.0, 1.0, rng)
}

/// Contracts a tensor output against fixed random weights so every output
/// element contributes to the checked scalar.
fn probe(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let c = g.constant(w.clone());
    let p = g.mul(out, c)?;
    Ok(g.sum(p))
}

fn labels(n: usize, classes: u16, rng: &mut ChaCha8Rng) -> Vec<u16> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

fn cases(seed: u64) -> Vec<(&'static str, Fun, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out: Vec<(&'static str, Fun, Vec<Tensor>)> = Vec::new();

    macro_rules! elementwise {
        ($name:literal, $op:ident) => {{
            let w = rnd(&[3, 4], r);
            out.push((
                $name,
                Box::new(move |g, v| {
                    let y = g.$op(v[0], v[1])?;
                    probe(g, y, &w)
                }),
                vec![rnd(&[3, 4], r), rnd(&[3, 4], r)],
            ));
        }};
    }
    elementwise!("add", add);
    elementwise!("sub", sub);
    elementwise!("mul", mul);

    let w = rnd(&[3, 4], r);
    out.push((
        "div",
        Box::new(move |g, v| {
            let y = g.div(v[0], v[1])?;
            probe(g, y, &w)
        }),
        vec![rnd(&[3, 4], r), uniform(&[3, 4], 0.5, 1.5, r)],
    ));

    let w = rnd(&[4, 3], r);
    out.push((
        "add_scalar+scale+exp",
        Box::new(move |g, v| {
            let y = g.add_scalar(v[0], 0.3);
            let y = g.scale(y, -1.7);
            let y = g.exp(y);
            probe(g, y, &w)
        }),
        vec![rnd(&[4, 3], r)],
    ));

    let w = rnd(&[4, 3], r);
    out.push((
        "log",
        Box::new(move |g, v| {
            let y = g.log(v[0])?;
            probe(g, y, &w)
        }),
        vec![uniform(&[4, 3], 0.2, 2.0, r)],
    ));

    let w = rnd(&[5, 5], r);
    let x = Tensor::from_fn(&[5, 5], |_| {
        let m: f64 = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    });
    out.push((
        "relu",
        Box::new(move |g, v| {
            let y = g.relu(v[0]);
            probe(g, y, &w)
        }),
        vec![x],
    ));

    let w = rnd(&[4, 5], r);
    out.push((
        "matmul",
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, &w)
        }),
        vec![rnd(&[4, 3], r), rnd(&[3, 5], r)],
    ));

    for (name, k, stride, pad, hw) in [
        ("conv2d k3 s1", 3usize, 1usize, 1usize, 6usize),
        ("conv2d k3 s2", 3, 2, 1, 7),
        ("conv2d k1 s1", 1, 1, 0, 5),
    ] {
        let oh = (hw + 2 * pad - k) / stride + 1;
        let w = rnd(&[2, 3, oh, oh], r);
        out.push((
            name,
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                probe(g, y, &w)
            }),
            vec![rnd(&[2, 2, hw, hw], r), rnd(&[3, 2, k, k], r), rnd(&[3], r)],
        ));
    }

    let targets: Vec<usize> = (0..6).map(|i| if i == 2 { 255 } else { r.gen_range(0..4) }).collect();
    let mask = vec![true, true, true, false, true, true];
    out.push((
        "softmax_ce",
        Box::new(move |g, v| g.softmax_ce(v[0], &targets, 255, Some(&mask))),
        vec![uniform(&[6, 4], -3.0, 3.0, r)],
    ));

    out.push((
        "sum+mean+max",
        Box::new(|g, v| {
            let s = g.sum(v[0]);
            let m = g.mean(v[0]);
            let x = g.max(v[0]);
            let a = g.add(s, m)?;
            g.add(a, x)
        }),
        vec![rnd(&[3, 4], r)],
    ));

    let w = rnd(&[4, 6], r);
    out.push((
        "reshape+transpose",
        Box::new(move |g, v| {
            let y = g.reshape(v[0], &[6, 4])?;
            let y = g.transpose(y)?;
            probe(g, y, &w)
        }),
        vec![rnd(&[2, 3, 4], r)],
    ));

    let w = rnd(&[9, 3], r);
    out.push((
        "gather_rows+concat_rows",
        Box::new(move |g, v| {
            let a = g.gather_rows(v[0], &[4, 0, 0, 2, 3, 4])?;
            let y = g.concat_rows(&[a, v[1]])?;
            probe(g, y, &w)
        }),
        vec![rnd(&[5, 3], r), rnd(&[3, 3], r)],
    ));

    let w = rnd(&[2, 2, 7, 5], r);
    out.push((
        "bilinear_resize",
        Box::new(move |g, v| {
            let y = g.bilinear_resize(v[0], 7, 5)?;
            probe(g, y, &w)
        }),
        vec![rnd(&[2, 2, 3, 4], r)],
    ));

    let w = rnd(&[2, 3, 2, 3], r);
    out.push((
        "nchw_to_rows+rows_to_nchw+add_row_bias",
        Box::new(move |g, v| {
            let rows = g.nchw_to_rows(v[0])?;
            let rows = g.add_row_bias(rows, v[1])?;
            let y = g.rows_to_nchw(rows, 2, 2, 3)?;
            probe(g, y, &w)
        }),
        vec![rnd(&[2, 3, 2, 3], r), rnd(&[3], r)],
    ));

    let w = rnd(&[4, 3], r);
    out.push((
        "normalize_rows",
        Box::new(move |g, v| {
            let y = g.normalize_rows(v[0])?;
            probe(g, y, &w)
        }),
        vec![rnd(&[4, 3], r)],
    ));

    let mut mask = vec![true; 4 * 6];
    mask[5] = false;
    mask[13] = false;
    out.push((
        "row_info_nce",
        Box::new(move |g, v| g.row_info_nce(v[0], &mask, &[(0, 1), (0, 4), (1, 0), (2, 5), (3, 3)])),
        vec![uniform(&[4, 6], -4.0, 4.0, r)],
    ));

    // Loss terms.
    let lab_a = LabelMap::new(3, 4, labels(12, 3, r)).unwrap();
    let mut lab_b = LabelMap::new(3, 4, labels(12, 3, r)).unwrap();
    lab_b.set(1, 1, 255);
    out.push((
        "ce_source",
        Box::new(move |g, v| ce_source(g, v[0], &[&lab_a, &lab_b])),
        vec![uniform(&[2, 3, 3, 4], -2.0, 2.0, r)],
    ));

    let lab = LabelMap::new(4, 4, labels(16, 3, r)).unwrap();
    let keep: Vec<bool> = (0..16).map(|_| r.gen_bool(0.6)).collect();
    out.push((
        "ce_target_mixed",
        Box::new(move |g, v| ce_target_mixed(g, v[0], &[&lab], &keep)),
        vec![uniform(&[1, 3, 4, 4], -2.0, 2.0, r)],
    ));

    let ccfg = ContrastConfig {
        max_anchors_per_class: 3,
        negatives_per_anchor: 8,
        bank_per_class: 2,
        ..ContrastConfig::default()
    };
    let pix_labels = labels(10, 3, r);
    let mut bank = FeatureBank::new(3, 4, 4).unwrap();
    for c in 0..3 {
        let row = rnd(&[4], r);
        let n = row.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        bank.push(c, &row.data().iter().map(|x| x / n).collect::<Vec<_>>()).unwrap();
    }
    let plan = plan_pixel_contrast(&pix_labels, Some(&bank), &ccfg, r);
    let c1 = ccfg.clone();
    out.push((
        "pixel_contrast",
        Box::new(move |g, v| {
            let e = g.normalize_rows(v[0])?;
            Ok(pixel_contrast(g, e, &pix_labels, &plan, &c1)?.loss)
        }),
        vec![rnd(&[10, 4], r)],
    ));

    let c2 = ccfg.clone();
    out.push((
        "patch_contrast",
        Box::new(move |g, v| {
            let a = g.normalize_rows(v[0])?;
            let b = g.normalize_rows(v[1])?;
            let x = g.normalize_rows(v[2])?;
            Ok(patch_contrast(g, a, b, &[(0, 1), (2, 3), (3, 0), (5, 5)], Some(x), &c2)?.loss)
        }),
        vec![rnd(&[6, 4], r), rnd(&[6, 4], r), rnd(&[3, 4], r)],
    ));

    let c3 = ccfg.clone();
    out.push((
        "temporal_contrast",
        Box::new(move |g, v| {
            let a = g.normalize_rows(v[0])?;
            let b = g.normalize_rows(v[1])?;
            Ok(temporal_contrast(g, a, b, &c3)?.loss)
        }),
        vec![rnd(&[5, 4], r), rnd(&[5, 4], r)],
    ));

    for (name, scenario) in [("total_loss static", Scenario::Static), ("total_loss video", Scenario::Video)] {
        let c4 = ccfg.clone();
        let lab = LabelMap::new(2, 2, labels(4, 3, r)).unwrap();
        let keep = vec![true, false, true, true];
        out.push((
            name,
            Box::new(move |g, v| {
                let ce_s = ce_source(g, v[0], &[&lab])?;
                let ce_t = ce_target_mixed(g, v[0], &[&lab], &keep)?;
                let a = g.normalize_rows(v[1])?;
                let b = g.normalize_rows(v[2])?;
                let patch = patch_contrast(g, a, b, &[(0, 0), (1, 2)], None, &c4)?.loss;
                let temporal = temporal_contrast(g, a, b, &c4)?.loss;
                let w = LossWeights {
                    alpha: 0.3,
                    beta: 0.5,
                    gamma: 0.7,
                };
                let vars = LossVars {
                    ce_source: ce_s,
                    ce_target: Some(ce_t),
                    pixel: Some(temporal),
                    patch: Some(patch),
                    temporal: Some(temporal),
                };
                total_loss(g, &vars, &w, scenario)
            }),
            vec![uniform(&[1, 3, 2, 2], -2.0, 2.0, r), rnd(&[3, 4], r), rnd(&[3, 4], r)],
        ));
    }

    // Whole network: every parameter of the backbone, classifier and heads.
    let mcfg = ModelConfig {
        num_classes: 3,
        stage_channels: [2, 3, 2],
        feat_dim: 3,
        embed_dim: 2,
    };
    let net = SegNet::new(mcfg, r);
    let names: Vec<String> = net.params.names().map(str::to_string).collect();
    let lab = LabelMap::new(8, 8, labels(64, 3, r)).unwrap();
    let wh = rnd(&[4, 2], r);
    let network: Fun = Box::new(move |g, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()).collect());
            let f = forward_features(g, &bound, v[names.len()])?;
            let z = forward_cls(g, &bound, f, (8, 8))?;
            let ce = ce_source(g, z, &[&lab])?;
            let mut total = ce;
            for head in [HeadKind::Pixel, HeadKind::Patch, HeadKind::Temporal] {
                let e = forward_head(g, &bound, f, head)?;
                let p = probe(g, e.rows, &wh)?;
                total = g.add(total, p)?;
            }
            Ok(total)
    });
    // Generic parameter values (zero-initialized biases can leave a head row
    // at the singular point of L2 normalization), redrawn until every relu
    // input clears the probe radius so the function is smooth where probed.
    let inputs = loop {
        let mut inputs: Vec<Tensor> = net.params.tensors().map(|t| uniform(t.shape(), -0.8, 0.8, r)).collect();
        inputs.push(uniform(&[1, 3, 8, 8], 0.0, 1.0, r));
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        if network(&mut g, &vars).is_ok() && g.relu_margin().is_some_and(|m| m > KINK_MARGIN) {
            break inputs;
        }
    };
    out.push(("network forward", network, inputs));
    out
}

/// Runs every case at `SUITE_EPS` / `SUITE_TOL`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    cases(seed)
        .into_iter()
        .map(|(name, f, inputs)| {
            Ok(SuiteCase {
                name,
                report: grad_check(&*f, &inputs, SUITE_EPS, SUITE_TOL)?,
            })
        })
        .collect()
}
