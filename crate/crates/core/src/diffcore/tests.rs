use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn check(f: &dyn Fn(&mut Graph, &[Var]) -> crate::Result<Var>, inputs: &[Tensor]) {
    let r = grad_check(f, inputs, 1e-4, 1e-4).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn add_and_relu_values() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[3.0, 4.0]));
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn square_derivative() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn log_rejects_nonpositive() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 0.0]));
    assert!(matches!(g.log(a), Err(Error::InvalidArgument { op: "log", .. })));
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[0.0, 1.0]));
    let r = g.relu(x);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn constants_never_receive_grad() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[3.0, 4.0]));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let ai = g.matmul(a, i).unwrap();
    assert_eq!(g.value(ai).data(), g.value(a).data());
    let ones = g.constant(t(&[2, 1], &[1.0, 1.0]));
    let v = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(v).data(), &[3.0, 7.0]);
    let bad = g.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(g.matmul(a, bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradient_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let f = |g: &mut Graph, v: &[Var]| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum(c))
    };
    let r = grad_check(&f, &[a, b], 1e-4, 1e-6).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[1, 1, 4, 5], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = g.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_all_ones_interior_is_nine() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    let v = g.value(y).data();
    // Hand count: interior sees 9 taps, edges 6, corners 4.
    let expected = [
        4.0, 6.0, 6.0, 4.0, 6.0, 9.0, 9.0, 6.0, 6.0, 9.0, 9.0, 6.0, 4.0, 6.0, 6.0, 4.0,
    ];
    assert_eq!(v, &expected);
}

#[test]
fn conv_rejects_non_integral_extent() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(g.conv2d(x, w, None, 2, 0).is_err());
}

#[test]
fn conv_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 3, 6, 6], &mut rng);
    let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let f = move |g: &mut Graph, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        };
        check(&f, &[x.clone(), w.clone(), b.clone()]);
    }
}

/// Literal per-row evaluation of mean softmax cross-entropy.
fn naive_ce(logits: &Tensor, targets: &[usize], ignore: usize) -> f64 {
    let c = logits.shape()[1];
    let mut total = 0.0;
    let mut n = 0;
    for (r, &tg) in targets.iter().enumerate() {
        if tg == ignore {
            continue;
        }
        let row = &logits.data()[r * c..(r + 1) * c];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[tg].exp() / denom).ln();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

#[test]
fn softmax_ce_examples() {
    let mut g = Graph::new();
    let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = g.softmax_ce(z, &[0], 255, None).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    let l = g.softmax_ce(z, &[255], 255, None).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    assert!(g.softmax_ce(z, &[2], 255, None).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = rand_tensor(&[5, 4], &mut rng);
    let targets = [0, 3, 255, 1, 2];
    let z = g.constant(logits.clone());
    let l = g.softmax_ce(z, &targets, 255, None).unwrap();
    assert!((g.value(l).item() - naive_ce(&logits, &targets, 255)).abs() < 1e-10);
}

#[test]
fn softmax_ce_is_stable_for_large_logits() {
    let mut g = Graph::new();
    let z = g.constant(t(&[1, 2], &[1000.0, 0.0]));
    let l = g.softmax_ce(z, &[0], 255, None).unwrap();
    assert!(g.value(l).item().abs() < 1e-12);
}

#[test]
fn softmax_ce_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = rand_tensor(&[6, 3], &mut rng);
    let mask = [true, false, true, true, true, true];
    let f = move |g: &mut Graph, v: &[Var]| g.softmax_ce(v[0], &[0, 1, 2, 255, 1, 0], 255, Some(&mask));
    check(&f, &[z]);
}

#[test]
fn reductions_and_views() {
    let mut g = Graph::new();
    let a = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let s = g.sum(a);
    assert_eq!(g.value(s).item(), 6.0);
    let m = g.mean(a);
    assert_eq!(g.value(m).item(), 2.0);
    let mx = g.max(a);
    assert_eq!(g.value(mx).item(), 3.0);

    let c = g.constant(Tensor::full(&[1, 2, 3, 5], 0.25));
    let up = g.bilinear_resize(c, 7, 11).unwrap();
    assert!(g.value(up).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = g.constant(Tensor::zeros(&[6, 3]));
    assert!(matches!(
        g.gather_rows(x, &[0, 6]),
        Err(Error::IndexOutOfRange { index: 6, .. })
    ));
}

#[test]
fn bilinear_matches_half_pixel_convention() {
    // 1-D row [0, 1] upsampled to 4: centers at -0.25, 0.25, 0.75, 1.25 in
    // source coordinates, clamped to [0, 1].
    let mut g = Graph::new();
    let a = g.constant(t(&[1, 1, 1, 2], &[0.0, 1.0]));
    let up = g.bilinear_resize(a, 1, 4).unwrap();
    assert_eq!(g.value(up).data(), &[0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn gather_rows_backward_is_scatter_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[6, 3], &mut rng);
    let index = [4, 1, 4, 0, 5, 4];
    let w = rand_tensor(&[6, 3], &mut rng);
    let mut g = Graph::new();
    let xv = g.param(x);
    let wv = g.constant(w.clone());
    let rows = g.gather_rows(xv, &index).unwrap();
    let p = g.mul(rows, wv).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    // Scatter-add oracle.
    let mut expected = vec![0.0; 18];
    for (k, &i) in index.iter().enumerate() {
        for j in 0..3 {
            expected[i * 3 + j] += w.data()[k * 3 + j];
        }
    }
    assert_eq!(g.grad(xv).unwrap().data(), expected.as_slice());
}

#[test]
fn view_and_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
    let w = rand_tensor(&[2, 3, 6, 7], &mut rng);
    let f = move |g: &mut Graph, v: &[Var]| {
        let up = g.bilinear_resize(v[0], 6, 7)?;
        let p = g.mul(up, v[1])?;
        let rows = g.nchw_to_rows(p)?;
        let tr = g.transpose(rows)?;
        let back = g.transpose(tr)?;
        let gathered = g.gather_rows(back, &[0, 5, 5, 17, 83])?;
        let r = g.reshape(gathered, &[15])?;
        let m = g.mean(r);
        let mx = g.max(back);
        let nchw = g.rows_to_nchw(back, 2, 6, 7)?;
        let e = g.exp(nchw);
        let s = g.sum(e);
        let t1 = g.add(m, mx)?;
        g.add(t1, s)
    };
    check(&f, &[x, w]);
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Tensor::from_fn(&[3, 4], |_| rng.gen_range(0.5..2.0));
    let b = Tensor::from_fn(&[3, 4], |_| rng.gen_range(0.5..2.0));
    let s = Tensor::scalar(1.7);
    let f = |g: &mut Graph, v: &[Var]| {
        let x = g.div(v[0], v[1])?;
        let y = g.log(x)?;
        let z = g.sub(y, v[2])?;
        let w = g.mul(z, v[0])?;
        let q = g.add_scalar(w, 0.3);
        let r = g.relu(q);
        let sc = g.scale(r, -1.5);
        let e = g.exp(sc);
        let d = g.div(v[2], e)?;
        Ok(g.sum(d))
    };
    check(&f, &[a, b, s]);
}

#[test]
fn relu_locally_linear_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[4, 4], |_| rng.gen_range(1.5..3.0));
    let f = |g: &mut Graph, v: &[Var]| {
        let r = g.relu(v[0]);
        Ok(g.sum(r))
    };
    let r = grad_check(&f, &[x], 1e-4, 1e-4).unwrap();
    assert!(r.max_rel_err < 1e-10, "{r:?}");
}

#[test]
fn sum_of_squares_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&[4, 4], &mut rng);
    let f = |g: &mut Graph, v: &[Var]| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    };
    let r = grad_check(&f, &[x], 1e-4, 1e-5).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn gradcheck_reports_non_finite() {
    let x = Tensor::scalar(800.0);
    let f = |g: &mut Graph, v: &[Var]| {
        let e = g.exp(v[0]);
        Ok(g.sum(e))
    };
    let r = grad_check(&f, &[x], 1e-4, 1e-4).unwrap();
    assert!(!r.passed());
    assert!(r.failure.is_some());
}

#[test]
fn row_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[5, 4], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    let y = rand_tensor(&[3, 4], &mut rng);
    let f = |g: &mut Graph, v: &[Var]| {
        let xb = g.add_row_bias(v[0], v[1])?;
        let n = g.normalize_rows(xb)?;
        let all = g.concat_rows(&[n, v[2]])?;
        let tr = g.transpose(all)?;
        let sim = g.matmul(n, tr)?;
        let sim = g.scale(sim, 1.0 / 0.5);
        let mut mask = vec![true; 5 * 8];
        for i in 0..5 {
            mask[i * 8 + i] = false;
        }
        mask[2 * 8 + 6] = false;
        g.row_info_nce(sim, &mask, &[(0, 1), (0, 5), (1, 7), (3, 2), (4, 0)])
    };
    check(&f, &[x, b, y]);
}

#[test]
fn row_info_nce_rejects_positive_outside_mask() {
    let mut g = Graph::new();
    let s = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.row_info_nce(s, &[true, false, true, true], &[(0, 1)]).is_err());
}

#[test]
fn normalize_rows_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&[7, 5], &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x);
    let n = g.normalize_rows(v).unwrap();
    for row in g.value(n).data().chunks(5) {
        let norm: f64 = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&[3, 3], &mut rng);
    let w = rand_tensor(&[3, 3], &mut rng);
    let mut g = Graph::new();
    let xv = g.param(x);
    let wv = g.param(w);
    let m = g.matmul(xv, wv).unwrap();
    let e = g.exp(m);
    let l1 = g.sum(e);
    let sq = g.mul(m, m).unwrap();
    let l2 = g.mean(sq);
    let total = g.add(l1, l2).unwrap();

    g.backward(l1).unwrap();
    let g1 = g.grad(xv).unwrap().clone();
    g.backward(l2).unwrap();
    let g2 = g.grad(xv).unwrap().clone();
    g.backward(total).unwrap();
    let gt = g.grad(xv).unwrap().clone();
    for i in 0..9 {
        assert!((gt.data()[i] - (g1.data()[i] + g2.data()[i])).abs() < 1e-12);
    }
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_tensor(&[1, 3, 8, 8], &mut rng);
        let w = rand_tensor(&[5, 3, 3, 3], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.constant(w);
        let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
