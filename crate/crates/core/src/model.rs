//! Toy encoder–decoder segmentation network, projection heads and the EMA
//! teacher.

use rand::Rng;

use crate::data::{LabelMap, IGNORE_INDEX};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered named parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.entries.len();
        self.entries.retain(|(n, _)| !n.starts_with(prefix));
        before - self.entries.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Fails unless `other` has the same names and shapes in the same order.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::invalid(
                "params",
                format!("{} vs {} parameters", self.entries.len(), other.entries.len()),
            ));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::invalid(
                    "params",
                    format!("{na}{:?} does not match {nb}{:?}", ta.shape(), tb.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Channels of the first three encoder stages.
    pub stage_channels: [usize; 3],
    /// Feature dimension D of the backbone output.
    pub feat_dim: usize,
    /// Embedding dimension E of every projection head.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 5,
            stage_channels: [32, 64, 64],
            feat_dim: 64,
            embed_dim: 32,
        }
    }
}

/// Output stride of the backbone.
pub const STRIDE: usize = 4;

/// (name, stride) of the 3x3 backbone convolutions, in order.
const BACKBONE: [(&str, usize); 5] = [
    ("enc1", 1),
    ("enc2", 2),
    ("enc3", 2),
    ("enc4", 1),
    ("dec", 1),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Pixel,
    Patch,
    Temporal,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Pixel, HeadKind::Patch, HeadKind::Temporal];

    fn prefix(self) -> &'static str {
        match self {
            HeadKind::Pixel => "head.pixel.",
            HeadKind::Patch => "head.patch.",
            HeadKind::Temporal => "head.temp.",
        }
    }
}

/// Prefix shared by every projection-head parameter.
pub const HEAD_PREFIX: &str = "head.";

/// Segmentation network: backbone, 1x1 classifier and three projection heads.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl SegNet {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Self {
        let [c1, c2, c3] = cfg.stage_channels;
        let d = cfg.feat_dim;
        let chans = [(3, c1), (c1, c2), (c2, c3), (c3, d), (d, d)];
        let mut params = ParamSet::new();
        for ((name, _), (cin, cout)) in BACKBONE.iter().zip(chans) {
            params.insert(format!("{name}.w"), uniform_init(&[cout, cin, 3, 3], cin * 9, rng));
            params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        }
        params.insert("cls.w", uniform_init(&[cfg.num_classes, d, 1, 1], d, rng));
        params.insert("cls.b", Tensor::zeros(&[cfg.num_classes]));
        for head in HeadKind::ALL {
            let p = head.prefix();
            params.insert(format!("{p}fc1.w"), uniform_init(&[d, d], d, rng));
            params.insert(format!("{p}fc1.b"), Tensor::zeros(&[d]));
            params.insert(format!("{p}fc2.w"), uniform_init(&[d, cfg.embed_dim], d, rng));
            params.insert(format!("{p}fc2.b"), Tensor::zeros(&[cfg.embed_dim]));
        }
        SegNet { cfg, params }
    }

    /// Places every parameter on `graph`, as gradient-receiving leaves when
    /// `trainable`.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        bind_params(&self.params, graph, trainable)
    }
}

/// Parameters of one network placed on a graph.
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
}

pub fn bind_params(params: &ParamSet, graph: &mut Graph, trainable: bool) -> Bound {
    let mut names = Vec::with_capacity(params.len());
    let mut vars = Vec::with_capacity(params.len());
    for (n, t) in params.iter() {
        names.push(n.to_string());
        vars.push(if trainable {
            graph.param(t.clone())
        } else {
            graph.constant(t.clone())
        });
    }
    Bound { names, vars }
}

impl Bound {
    /// Binds existing graph variables under parameter names.
    pub fn from_vars(named: Vec<(String, Var)>) -> Self {
        let (names, vars) = named.into_iter().unzip();
        Bound { names, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::invalid("model", format!("missing parameter {name}")))
    }

    /// Gradients in parameter order; parameters untouched by the loss get zeros.
    pub fn grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
            })
            .collect()
    }
}

/// Backbone features `[B, D, H/4, W/4]` for a `[B, 3, H, W]` input.
pub fn forward_features(graph: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
    let s = graph.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] % STRIDE != 0 || s[3] % STRIDE != 0 {
        return Err(Error::invalid(
            "forward_features",
            format!("input {s:?} must be [B, 3, H, W] with H, W multiples of {STRIDE}"),
        ));
    }
    let mut h = x;
    for (name, stride) in BACKBONE {
        let w = p.get(&format!("{name}.w"))?;
        let b = p.get(&format!("{name}.b"))?;
        let y = graph.conv2d(h, w, Some(b), stride, 1)?;
        h = graph.relu(y);
    }
    Ok(h)
}

/// Per-pixel class logits `[B, C, H, W]` at input resolution.
pub fn forward_cls(graph: &mut Graph, p: &Bound, features: Var, out_hw: (usize, usize)) -> Result<Var> {
    let w = p.get("cls.w")?;
    let b = p.get("cls.b")?;
    let z = graph.conv2d(features, w, Some(b), 1, 0)?;
    graph.bilinear_resize(z, out_hw.0, out_hw.1)
}

/// Unit-norm embeddings of one projection head, one row per feature cell.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    /// `[B*h*w, E]`, row `b*h*w + y*w + x`.
    pub rows: Var,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

/// Two affine layers with a rectifier between, then L2 normalization.
pub fn forward_head(graph: &mut Graph, p: &Bound, features: Var, head: HeadKind) -> Result<Embeddings> {
    let s = graph.shape(features).to_vec();
    let pre = head.prefix();
    let rows = graph.nchw_to_rows(features)?;
    let h1 = graph.matmul(rows, p.get(&format!("{pre}fc1.w"))?)?;
    let h1 = graph.add_row_bias(h1, p.get(&format!("{pre}fc1.b"))?)?;
    let h1 = graph.relu(h1);
    let h2 = graph.matmul(h1, p.get(&format!("{pre}fc2.w"))?)?;
    let h2 = graph.add_row_bias(h2, p.get(&format!("{pre}fc2.b"))?)?;
    let rows = graph.normalize_rows(h2)?;
    Ok(Embeddings {
        rows,
        batch: s[0],
        h: s[2],
        w: s[3],
    })
}

/// Stacks `[3, H, W]` images into a `[B, 3, H, W]` batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("stack_images", "empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                left: shape,
                right: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Class logits of a plain forward pass, no gradient bookkeeping kept.
pub fn predict_logits(params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = bind_params(params, &mut g, false);
    let xv = g.constant(x.clone());
    let f = forward_features(&mut g, &p, xv)?;
    let s = x.shape();
    let z = forward_cls(&mut g, &p, f, (s[2], s[3]))?;
    Ok(g.value(z).clone())
}

/// Per-pixel argmax and max-probability of `[B, C, H, W]` logits, one
/// `(labels, confidence)` pair per batch item.
pub fn softmax_argmax(logits: &Tensor) -> Vec<(LabelMap, Vec<f64>)> {
    let s = logits.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let d = logits.data();
    (0..b)
        .map(|bi| {
            let mut labels = vec![0u16; hw];
            let mut conf = vec![0.0; hw];
            for p in 0..hw {
                let at = |ci: usize| d[(bi * c + ci) * hw + p];
                let mut best = 0;
                let mut m = at(0);
                for ci in 1..c {
                    if at(ci) > m {
                        m = at(ci);
                        best = ci;
                    }
                }
                let sum: f64 = (0..c).map(|ci| (at(ci) - m).exp()).sum();
                labels[p] = best as u16;
                conf[p] = 1.0 / sum;
            }
            (LabelMap::new(h, w, labels).expect("extents match"), conf)
        })
        .collect()
}

/// Mean-teacher copy of the student parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ParamSet,
    pub momentum: f64,
}

impl TeacherState {
    /// Exact copy of the student.
    pub fn from_student(student: &SegNet, momentum: f64) -> Self {
        TeacherState {
            params: student.params.clone(),
            momentum,
        }
    }
}

/// `teacher <- m * teacher + (1 - m) * student`, parameter by parameter.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid("ema_update", format!("momentum {m} outside [0, 1]")));
    }
    teacher.params.check_compatible(student)?;
    for (t, s) in teacher.params.tensors_mut().zip(student.tensors()) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = m * *tv + (1.0 - m) * sv;
        }
    }
    Ok(())
}

/// Teacher pseudo labels for a `[B, 3, H, W]` batch.
#[derive(Clone, Debug)]
pub struct PseudoLabels {
    pub labels: Vec<LabelMap>,
    /// True where the max softmax probability exceeds the threshold.
    pub keep: Vec<Vec<bool>>,
    pub confidence: Vec<Vec<f64>>,
}

pub fn pseudo_label(teacher: &ParamSet, x: &Tensor, threshold: f64) -> Result<PseudoLabels> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid("pseudo_label", format!("threshold {threshold} outside [0, 1]")));
    }
    let logits = predict_logits(teacher, x)?;
    Ok(pseudo_label_from_logits(&logits, threshold))
}

pub fn pseudo_label_from_logits(logits: &Tensor, threshold: f64) -> PseudoLabels {
    let mut out = PseudoLabels {
        labels: Vec::new(),
        keep: Vec::new(),
        confidence: Vec::new(),
    };
    for (labels, conf) in softmax_argmax(logits) {
        out.keep.push(conf.iter().map(|&p| p > threshold).collect());
        out.labels.push(labels);
        out.confidence.push(conf);
    }
    out
}

/// Nearest-cell downsampling of labels to the feature grid: each cell takes
/// the label of the pixel at its center.
pub fn labels_to_grid(labels: &LabelMap, stride: usize) -> Vec<u16> {
    let (gh, gw) = (labels.h / stride, labels.w / stride);
    let mut out = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let y = gy * stride + stride / 2;
            let x = gx * stride + stride / 2;
            out.push(labels.get(x, y));
        }
    }
    out
}

/// True when a grid label can serve as a contrast anchor.
pub fn is_labeled(v: u16) -> bool {
    v != IGNORE_INDEX
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::grad_check;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            stage_channels: [2, 3, 3],
            feat_dim: 4,
            embed_dim: 3,
        }
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = SegNet::new(ModelConfig::default(), &mut rng);
        net.params.tensors_mut().for_each(|t| t.data_mut().fill(0.0));
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[1, 3, 16, 16], 0.7));
        let f = forward_features(&mut g, &p, x).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_and_logit_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = SegNet::new(ModelConfig { feat_dim: 32, ..ModelConfig::default() }, &mut rng);
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let x = g.constant(Tensor::full(&[1, 3, 32, 32], 0.1));
        let f = forward_features(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(f), &[1, 32, 8, 8]);
        let z = forward_cls(&mut g, &p, f, (32, 32)).unwrap();
        assert_eq!(g.shape(z), &[1, 5, 32, 32]);
    }

    #[test]
    fn rejects_extent_not_multiple_of_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = SegNet::new(small_cfg(), &mut rng);
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 3, 10, 12]));
        assert!(forward_features(&mut g, &p, x).is_err());
    }

    #[test]
    fn constant_features_give_constant_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = SegNet::new(ModelConfig::default(), &mut rng);
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let f = g.constant(Tensor::full(&[1, 64, 8, 8], 0.3));
        let z = forward_cls(&mut g, &p, f, (32, 32)).unwrap();
        let v = g.value(z).data();
        for plane in v.chunks(32 * 32) {
            assert!(plane.iter().all(|&x| (x - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn head_embeddings_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = SegNet::new(ModelConfig::default(), &mut rng);
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let x = g.constant(Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 7919) % 97) as f64 / 97.0));
        let f = forward_features(&mut g, &p, x).unwrap();
        for head in HeadKind::ALL {
            let e = forward_head(&mut g, &p, f, head).unwrap();
            assert_eq!(g.shape(e.rows), &[2 * 4 * 4, 32]);
            for row in g.value(e.rows).data().chunks(32) {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
                let selfsim: f64 = row.iter().map(|v| v * v).sum();
                assert!((selfsim - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn first_conv_weight_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = SegNet::new(small_cfg(), &mut rng);
        let x = Tensor::from_fn(&[1, 3, 8, 8], |_| rng.gen_range(0.0..1.0));
        let w0 = net.params.get("enc1.w").unwrap().clone();
        let params = net.params.clone();
        let f = move |g: &mut Graph, v: &[Var]| {
            let mut p = params.clone();
            p.insert("enc1.w", g.value(v[0]).clone());
            let bound = bind_params(&p, g, false);
            // Swap in the differentiable weight.
            let bound = Bound {
                vars: bound
                    .names
                    .iter()
                    .zip(&bound.vars)
                    .map(|(n, &var)| if n == "enc1.w" { v[0] } else { var })
                    .collect(),
                names: bound.names,
            };
            let xv = g.constant(x.clone());
            let feats = forward_features(g, &bound, xv)?;
            Ok(g.sum(feats))
        };
        let r = grad_check(&f, &[w0], 1e-4, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn normalization_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::from_fn(&[6, 5], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[6, 5], |_| rng.gen_range(-1.0..1.0));
        let f = |g: &mut Graph, v: &[Var]| {
            let n = g.normalize_rows(v[0])?;
            let p = g.mul(n, v[1])?;
            Ok(g.sum(p))
        };
        let r = grad_check(&f, &[x, w], 1e-4, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn ema_edge_momenta() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let student = SegNet::new(small_cfg(), &mut rng);
        let other = SegNet::new(small_cfg(), &mut rng);
        let mut t = TeacherState::from_student(&other, 0.0);
        ema_update(&mut t, &student.params, 0.0).unwrap();
        assert_eq!(t.params, student.params);

        let mut t = TeacherState::from_student(&other, 1.0);
        ema_update(&mut t, &student.params, 1.0).unwrap();
        assert_eq!(t.params, other.params);

        let mut zero = ParamSet::new();
        zero.insert("w", Tensor::zeros(&[1]));
        let mut one = ParamSet::new();
        one.insert("w", Tensor::full(&[1], 1.0));
        let mut t = TeacherState {
            params: zero,
            momentum: 0.999,
        };
        ema_update(&mut t, &one, 0.999).unwrap();
        assert!((t.params.get("w").unwrap().item() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let mut a = ParamSet::new();
        a.insert("w", Tensor::zeros(&[2]));
        let mut b = ParamSet::new();
        b.insert("w", Tensor::zeros(&[3]));
        let mut t = TeacherState {
            params: a,
            momentum: 0.5,
        };
        assert!(ema_update(&mut t, &b, 0.5).is_err());
    }

    #[test]
    fn pseudo_label_thresholds() {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        // Two classes: logits (ln(p/(1-p)), 0) give softmax (p, 1-p).
        let z = Tensor::new(
            &[1, 2, 1, 2],
            vec![logit(0.97), logit(0.95), 0.0, 0.0],
        )
        .unwrap();
        let pl = pseudo_label_from_logits(&z, 0.968);
        assert_eq!(pl.keep[0], vec![true, false]);
        assert_eq!(pl.labels[0].data(), &[0, 0]);
        assert!(pseudo_label_from_logits(&z, 0.0).keep[0].iter().all(|&k| k));
        assert!(pseudo_label_from_logits(&z, 1.0).keep[0].iter().all(|&k| !k));
    }

    #[test]
    fn inference_ignores_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = SegNet::new(small_cfg(), &mut rng);
        let x = Tensor::from_fn(&[1, 3, 8, 8], |_| rng.gen_range(0.0..1.0));
        let full = predict_logits(&net.params, &x).unwrap();
        let mut stripped = net.params.clone();
        assert_eq!(stripped.remove_prefix(HEAD_PREFIX), 12);
        let pruned = predict_logits(&stripped, &x).unwrap();
        assert_eq!(full, pruned);
    }

    #[test]
    fn grid_labels_sample_cell_centers() {
        let labels = LabelMap::new(4, 8, (0..32).map(|i| (i % 8) as u16).collect()).unwrap();
        assert_eq!(labels_to_grid(&labels, 4), vec![2, 6]);
    }
}
