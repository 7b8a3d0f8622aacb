//! Tape of differentiable operations.
//!
//! Nodes are appended in execution order, so every input of a node has a
//! smaller index than the node itself. The reverse of insertion order is a
//! valid reverse topological order and `backward` visits each node once.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

struct ConvSaved {
    x: Var,
    w: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
    /// im2col buffers, one `[C*k*k, Ho*Wo]` block per batch item.
    cols: Vec<f64>,
}

struct CeSaved {
    logits: Var,
    probs: Vec<f64>,
    targets: Vec<usize>,
    active: Vec<bool>,
    count: usize,
}

struct NceSaved {
    sim: Var,
    mask: Vec<bool>,
    positives: Vec<(usize, usize)>,
    /// Row-wise softmax restricted to the candidate mask.
    probs: Vec<f64>,
    row_pairs: Vec<usize>,
}

enum Op {
    Leaf,
    Binary { kind: Binary, a: Var, b: Var },
    AddScalar(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    MatMul(Var, Var),
    Conv2d(Box<ConvSaved>),
    SoftmaxCe(Box<CeSaved>),
    Sum(Var),
    Mean(Var),
    Max { a: Var, index: usize },
    Reshape(Var),
    Transpose(Var),
    GatherRows { a: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    Bilinear(Var),
    NchwToRows(Var),
    RowsToNchw(Var),
    AddRowBias(Var, Var),
    NormalizeRows { a: Var, norms: Vec<f64> },
    RowInfoNce(Box<NceSaved>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Norm floor used by [`Graph::normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Reverse-mode automatic differentiation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Copies the current value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the most recent `backward` call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        let out_shape = if sa == sb || nb == 1 {
            sa.to_vec()
        } else if na == 1 {
            sb.to_vec()
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            };
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = out_shape.iter().product::<usize>();
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (pick(av, i), pick(bv, i));
            out.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => {
                    if y == 0.0 {
                        return Err(Error::invalid("div", format!("division by zero at {i}")));
                    }
                    x / y
                }
            });
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, out)?, rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).data().iter().position(|&x| x <= 0.0) {
            return Err(Error::invalid(
                "log",
                format!("nonpositive input {} at {i}", self.value(a).data()[i]),
            ));
        }
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Log(a)))
    }

    /// Smallest `|x|` over the inputs of every relu on the tape, `None`
    /// without relus. Finite-difference checks use it to avoid kinks.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.value(a).data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Relu(a))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// 2-D cross-correlation over `[B, C, H, W]` with weights `[F, C, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            left: sx.clone(),
            right: sw.clone(),
        };
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(mismatch());
        }
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, k) = (sw[0], sw[2]);
        if k != 1 && k != 3 {
            return Err(Error::invalid("conv2d", format!("kernel size {k} not in {{1,3}}")));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid("conv2d", format!("stride {stride} not in {{1,2}}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: vec![f],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let span_h = (h + 2 * pad)
            .checked_sub(k)
            .ok_or_else(|| Error::invalid("conv2d", "kernel larger than padded input"))?;
        let span_w = (wd + 2 * pad)
            .checked_sub(k)
            .ok_or_else(|| Error::invalid("conv2d", "kernel larger than padded input"))?;
        // A remainder is tolerated only when it falls inside the trailing
        // padding, so no input pixel is dropped.
        if span_h % stride > pad || span_w % stride > pad {
            return Err(Error::invalid(
                "conv2d",
                format!("output extent not integral for input {h}x{wd}, k={k}, stride={stride}, pad={pad}"),
            ));
        }
        let (ho, wo) = (span_h / stride + 1, span_w / stride + 1);
        let ckk = c * k * k;
        let hw_out = ho * wo;
        let mut cols = vec![0.0; bsz * ckk * hw_out];
        let mut out = vec![0.0; bsz * f * hw_out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for b in 0..bsz {
                let col = &mut cols[b * ckk * hw_out..(b + 1) * ckk * hw_out];
                im2col(&xv[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, k, stride, pad, ho, wo, col);
                let o = &mut out[b * f * hw_out..(b + 1) * f * hw_out];
                if let Some(bv) = bias {
                    let bias = self.value(bv).data();
                    for (fi, row) in o.chunks_mut(hw_out).enumerate() {
                        row.fill(bias[fi]);
                    }
                }
                let beta = if bias.is_some() { 1.0 } else { 0.0 };
                gemm(f, ckk, hw_out, wv, (ckk, 1), col, (hw_out, 1), o, beta);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        let saved = ConvSaved {
            x,
            w,
            bias,
            stride,
            pad,
            cols: if rg { cols } else { Vec::new() },
        };
        Ok(self.push(
            Tensor::new(&[bsz, f, ho, wo], out)?,
            rg,
            Op::Conv2d(Box::new(saved)),
        ))
    }

    /// Mean softmax cross-entropy over rows of `[N, C]` logits.
    ///
    /// Rows whose target equals `ignore_index` or whose mask entry is false
    /// are skipped; the result is 0 when no row survives.
    pub fn softmax_ce(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || mask.is_some_and(|m| m.len() != s[0]) {
            return Err(Error::ShapeMismatch {
                op: "softmax_ce",
                left: s,
                right: vec![targets.len()],
            });
        }
        let (n, c) = (s[0], s[1]);
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut active = vec![false; n];
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..n {
            let t = targets[r];
            if t == ignore_index {
                continue;
            }
            if t >= c {
                return Err(Error::IndexOutOfRange {
                    op: "softmax_ce",
                    index: t,
                    extent: c,
                });
            }
            if mask.is_some_and(|m| !m[r]) {
                continue;
            }
            let row = &z[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[r * c + j] = e;
                sum += e;
            }
            for p in &mut probs[r * c..(r + 1) * c] {
                *p /= sum;
            }
            total += m + sum.ln() - row[t];
            active[r] = true;
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(&[logits]);
        let saved = CeSaved {
            logits,
            probs,
            targets: targets.to_vec(),
            active,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), rg, Op::SoftmaxCe(Box::new(saved))))
    }

    // ---- reductions and views ----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Global maximum; the gradient flows to the first maximal element.
    pub fn max(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let mut index = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[index] {
                index = i;
            }
        }
        let value = Tensor::scalar(d[index]);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Max { a, index })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[c, r], out)?, rg, Op::Transpose(a)))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::invalid("gather_rows", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        if index.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                extent: r,
            });
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&[index.len(), c], out)?,
            rg,
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
        ))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let cols = self.shape(first)[1];
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: s.to_vec(),
                });
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&[rows, cols], out)?, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Bilinear resize of `[B, C, H, W]` with half-pixel centers
    /// (align-corners false).
    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", format!("bad input {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let ys = resize_taps(h, out_h);
        let xs = resize_taps(w, out_w);
        let d = self.value(a).data();
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], out_h, out_w], out)?,
            rg,
            Op::Bilinear(a),
        ))
    }

    /// `[B, C, H, W]` to `[B*H*W, C]`; row `b*H*W + y*W + x`.
    pub fn nchw_to_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid("nchw_to_rows", format!("expected rank 4, got {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let d = self.value(a).data();
        let mut out = vec![0.0; b * c * hw];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &d[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (p, &v) in plane.iter().enumerate() {
                    out[(bi * hw + p) * c + ci] = v;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[b * hw, c], out)?, rg, Op::NchwToRows(a)))
    }

    /// Inverse of [`Graph::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, a: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != b * h * w {
            return Err(Error::ShapeMismatch {
                op: "rows_to_nchw",
                left: s,
                right: vec![b, h, w],
            });
        }
        let (c, hw) = (s[1], h * w);
        let d = self.value(a).data();
        let mut out = vec![0.0; b * c * hw];
        for bi in 0..b {
            for p in 0..hw {
                for ci in 0..c {
                    out[(bi * c + ci) * hw + p] = d[(bi * hw + p) * c + ci];
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&[b, c, h, w], out)?, rg, Op::RowsToNchw(a)))
    }

    /// Adds a `[C]` bias to every row of `[N, C]`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb != [sa[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: sa,
                right: sb,
            });
        }
        let bv = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(sa[1]) {
            for (o, &b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Tensor::new(&sa, out)?, rg, Op::AddRowBias(a, bias)))
    }

    /// Scales every row of `[N, E]` to unit L2 norm, `x / max(|x|, 1e-12)`.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid("normalize_rows", format!("expected rank 2, got {s:?}")));
        }
        let e = s[1];
        let mut out = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(s[0]);
        for row in out.chunks_mut(e) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&s, out)?, rg, Op::NormalizeRows { a, norms }))
    }

    /// Sum over `(row, col)` positives of `-log softmax(sim[row, mask_row])[col]`.
    ///
    /// `mask[row * K + k]` selects the candidate columns of each row; every
    /// positive column must be a candidate of its row.
    pub fn row_info_nce(
        &mut self,
        sim: Var,
        mask: &[bool],
        positives: &[(usize, usize)],
    ) -> Result<Var> {
        let s = self.shape(sim).to_vec();
        if s.len() != 2 || mask.len() != s[0] * s[1] {
            return Err(Error::ShapeMismatch {
                op: "row_info_nce",
                left: s,
                right: vec![mask.len()],
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let mut row_pairs = vec![0usize; rows];
        for &(r, c) in positives {
            if r >= rows || c >= cols {
                return Err(Error::IndexOutOfRange {
                    op: "row_info_nce",
                    index: if r >= rows { r } else { c },
                    extent: if r >= rows { rows } else { cols },
                });
            }
            if !mask[r * cols + c] {
                return Err(Error::invalid(
                    "row_info_nce",
                    format!("positive ({r}, {c}) is not among the row's candidates"),
                ));
            }
            row_pairs[r] += 1;
        }
        let z = self.value(sim).data();
        let mut probs = vec![0.0; rows * cols];
        let mut lse = vec![0.0; rows];
        for r in 0..rows {
            if row_pairs[r] == 0 {
                continue;
            }
            let row = &z[r * cols..(r + 1) * cols];
            let m = row
                .iter()
                .zip(&mask[r * cols..(r + 1) * cols])
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..cols {
                if mask[r * cols + k] {
                    let e = (row[k] - m).exp();
                    probs[r * cols + k] = e;
                    sum += e;
                }
            }
            for k in 0..cols {
                probs[r * cols + k] /= sum;
            }
            lse[r] = m + sum.ln();
        }
        let total: f64 = positives.iter().map(|&(r, c)| lse[r] - z[r * cols + c]).sum();
        let rg = self.rg(&[sim]);
        let saved = NceSaved {
            sim,
            mask: mask.to_vec(),
            positives: positives.to_vec(),
            probs,
            row_pairs,
        };
        Ok(self.push(Tensor::scalar(total), rg, Op::RowInfoNce(Box::new(saved))))
    }

    // ---- backward ----------------------------------------------------

    /// Propagates gradients from the scalar `root` to every node that
    /// requires them. Gradients from an earlier call are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let (lo, hi) = self.grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut sink = Sink {
                nodes: &self.nodes,
                grads: lo,
            };
            backprop(node, g.data(), &mut sink);
        }
        // Intermediate gradients are kept; clearing non-requiring leaves
        // keeps the "no grad unless requested" contract explicit.
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(())
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
}

impl<'a> Sink<'a> {
    fn val(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v`
    /// does not require a gradient.
    fn buf(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }
}

fn backprop(node: &Node, g: &[f64], sink: &mut Sink<'_>) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let av = sink.val(*a).data();
            let bv = sink.val(*b).data();
            let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
            let fold = |buf: &mut [f64], i: usize, v: f64| {
                if buf.len() == 1 {
                    buf[0] += v
                } else {
                    buf[i] += v
                }
            };
            if let Some(da) = sink.buf(*a) {
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add | Binary::Sub => gi,
                        Binary::Mul => gi * pick(bv, i),
                        Binary::Div => gi / pick(bv, i),
                    };
                    fold(da, i, d);
                }
            }
            if let Some(db) = sink.buf(*b) {
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        Binary::Add => gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * pick(av, i),
                        Binary::Div => {
                            let y = pick(bv, i);
                            -gi * pick(av, i) / (y * y)
                        }
                    };
                    fold(db, i, d);
                }
            }
        }
        Op::AddScalar(a) => {
            if let Some(da) = sink.buf(*a) {
                axpy(da, g, 1.0);
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = sink.buf(*a) {
                axpy(da, g, *c);
            }
        }
        Op::Exp(a) => {
            if let Some(da) = sink.buf(*a) {
                for ((d, &gi), &y) in da.iter_mut().zip(g).zip(out) {
                    *d += gi * y;
                }
            }
        }
        Op::Log(a) => {
            let x = sink.val(*a).data();
            if let Some(da) = sink.buf(*a) {
                for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                    *d += gi / xi;
                }
            }
        }
        Op::Relu(a) => {
            if let Some(da) = sink.buf(*a) {
                for ((d, &gi), &y) in da.iter_mut().zip(g).zip(out) {
                    if y > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (sink.val(*a).shape().to_vec(), sink.val(*b).shape().to_vec());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let av = sink.val(*a).data();
            let bv = sink.val(*b).data();
            if let Some(da) = sink.buf(*a) {
                // dA = dC · Bᵀ
                gemm(m, n, k, g, (n, 1), bv, (1, n), da, 1.0);
            }
            if let Some(db) = sink.buf(*b) {
                // dB = Aᵀ · dC
                gemm(k, m, n, av, (1, k), g, (n, 1), db, 1.0);
            }
        }
        Op::Conv2d(saved) => conv_backward(saved, &node.value, g, sink),
        Op::SoftmaxCe(saved) => {
            if saved.count == 0 {
                return;
            }
            let c = sink.val(saved.logits).shape()[1];
            let scale = g[0] / saved.count as f64;
            if let Some(dz) = sink.buf(saved.logits) {
                for (r, &on) in saved.active.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for j in 0..c {
                        let onehot = if j == saved.targets[r] { 1.0 } else { 0.0 };
                        dz[r * c + j] += scale * (saved.probs[r * c + j] - onehot);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = sink.buf(*a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(da) = sink.buf(*a) {
                let s = g[0] / da.len() as f64;
                da.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Max { a, index } => {
            if let Some(da) = sink.buf(*a) {
                da[*index] += g[0];
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = sink.buf(*a) {
                axpy(da, g, 1.0);
            }
        }
        Op::Transpose(a) => {
            let s = sink.val(*a).shape().to_vec();
            let (r, c) = (s[0], s[1]);
            if let Some(da) = sink.buf(*a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::GatherRows { a, index } => {
            let c = sink.val(*a).shape()[1];
            if let Some(da) = sink.buf(*a) {
                for (k, &i) in index.iter().enumerate() {
                    axpy(&mut da[i * c..(i + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = sink.val(p).numel();
                if let Some(dp) = sink.buf(p) {
                    axpy(dp, &g[offset..offset + n], 1.0);
                }
                offset += n;
            }
        }
        Op::Bilinear(a) => {
            let s = sink.val(*a).shape().to_vec();
            let os = node.value.shape();
            let (planes, h, w, oh, ow) = (s[0] * s[1], s[2], s[3], os[2], os[3]);
            let ys = resize_taps(h, oh);
            let xs = resize_taps(w, ow);
            if let Some(da) = sink.buf(*a) {
                for p in 0..planes {
                    let dst = &mut da[p * h * w..(p + 1) * h * w];
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let gv = src[oy * ow + ox];
                            dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                            dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                            dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                            dst[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
            }
        }
        Op::NchwToRows(a) => {
            let s = sink.val(*a).shape().to_vec();
            let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
            if let Some(da) = sink.buf(*a) {
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            da[(bi * c + ci) * hw + p] += g[(bi * hw + p) * c + ci];
                        }
                    }
                }
            }
        }
        Op::RowsToNchw(a) => {
            let os = node.value.shape();
            let (b, c, hw) = (os[0], os[1], os[2] * os[3]);
            if let Some(da) = sink.buf(*a) {
                for bi in 0..b {
                    for ci in 0..c {
                        for p in 0..hw {
                            da[(bi * hw + p) * c + ci] += g[(bi * c + ci) * hw + p];
                        }
                    }
                }
            }
        }
        Op::AddRowBias(a, bias) => {
            if let Some(da) = sink.buf(*a) {
                axpy(da, g, 1.0);
            }
            if let Some(db) = sink.buf(*bias) {
                let c = db.len();
                for row in g.chunks(c) {
                    axpy(db, row, 1.0);
                }
            }
        }
        Op::NormalizeRows { a, norms } => {
            let e = node.value.shape()[1];
            if let Some(da) = sink.buf(*a) {
                for (r, &n) in norms.iter().enumerate() {
                    let y = &out[r * e..(r + 1) * e];
                    let gy = &g[r * e..(r + 1) * e];
                    let d = &mut da[r * e..(r + 1) * e];
                    if n > NORM_EPS {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..e {
                            d[j] += (gy[j] - y[j] * dot) / n;
                        }
                    } else {
                        for j in 0..e {
                            d[j] += gy[j] / n;
                        }
                    }
                }
            }
        }
        Op::RowInfoNce(saved) => {
            let cols = sink.val(saved.sim).shape()[1];
            if let Some(ds) = sink.buf(saved.sim) {
                for (r, &count) in saved.row_pairs.iter().enumerate() {
                    if count == 0 {
                        continue;
                    }
                    let w = g[0] * count as f64;
                    for k in 0..cols {
                        if saved.mask[r * cols + k] {
                            ds[r * cols + k] += w * saved.probs[r * cols + k];
                        }
                    }
                }
                for &(r, c) in &saved.positives {
                    ds[r * cols + c] -= g[0];
                }
            }
        }
    }
}

fn conv_backward(saved: &ConvSaved, out: &Tensor, g: &[f64], sink: &mut Sink<'_>) {
    let sx = sink.val(saved.x).shape().to_vec();
    let sw = sink.val(saved.w).shape().to_vec();
    let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (f, k) = (sw[0], sw[2]);
    let (ho, wo) = (out.shape()[2], out.shape()[3]);
    let ckk = c * k * k;
    let hw_out = ho * wo;
    if let Some(bias) = saved.bias {
        if let Some(db) = sink.buf(bias) {
            for b in 0..bsz {
                for (fi, d) in db.iter_mut().enumerate() {
                    let off = (b * f + fi) * hw_out;
                    *d += g[off..off + hw_out].iter().sum::<f64>();
                }
            }
        }
    }
    let wv = sink.val(saved.w).data();
    if let Some(dw) = sink.buf(saved.w) {
        for b in 0..bsz {
            let dy = &g[b * f * hw_out..(b + 1) * f * hw_out];
            let col = &saved.cols[b * ckk * hw_out..(b + 1) * ckk * hw_out];
            // dW += dY · colsᵀ
            gemm(f, hw_out, ckk, dy, (hw_out, 1), col, (1, hw_out), dw, 1.0);
        }
    }
    if let Some(dx) = sink.buf(saved.x) {
        let mut dcol = vec![0.0; ckk * hw_out];
        for b in 0..bsz {
            let dy = &g[b * f * hw_out..(b + 1) * f * hw_out];
            // dcols = Wᵀ · dY
            gemm(ckk, f, hw_out, wv, (1, ckk), dy, (hw_out, 1), &mut dcol, 0.0);
            col2im(
                &dcol,
                c,
                h,
                wd,
                k,
                saved.stride,
                saved.pad,
                ho,
                wo,
                &mut dx[b * c * h * wd..(b + 1) * c * h * wd],
            );
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// `C = A·B + beta·C` for row-major `C[m×n]` with arbitrary strides on A
/// and B given as `(row_stride, col_stride)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw_out..][..hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f64],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw_out..][..hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps `(i0, i1, lambda)` for each output coordinate of a
/// half-pixel-center linear resize from `n_in` to `n_out`.
pub(crate) fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let lambda = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}
