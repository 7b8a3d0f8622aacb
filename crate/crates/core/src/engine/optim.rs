//! AdamW with decoupled weight decay.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators mirroring a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One bias-corrected AdamW step:
/// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
///
/// Nothing is modified if any gradient is non-finite or misshapen.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
    wd: f64,
    opt: &AdamW,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(
            "optimizer_step",
            format!("{} grads for {} parameters", grads.len(), params.len()),
        ));
    }
    for (((name, p), g), m) in params.iter().zip(grads).zip(&state.m) {
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "optimizer_step",
                format!("non-finite gradient for {name} at flat index {i}"),
            ));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - opt.beta1.powf(t);
    let bc2 = 1.0 - opt.beta2.powf(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * (mh / (vh.sqrt() + opt.eps) + wd * p[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::new(&[2], vec![v, -v]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = one(0.7);
        let before = p.clone();
        let mut s = OptimState::new(&p);
        for _ in 0..5 {
            optimizer_step(&mut p, &[Tensor::zeros(&[2])], &mut s, 0.1, 0.0, &AdamW::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks() {
        let mut p = one(0.7);
        let mut s = OptimState::new(&p);
        optimizer_step(&mut p, &[Tensor::zeros(&[2])], &mut s, 0.1, 0.01, &AdamW::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.7 - 0.1 * (0.01 * 0.7), -0.7 - 0.1 * (0.01 * -0.7)]);
        assert!((p.get("w").unwrap().data()[0] - 0.7 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_by_lr_times_sign() {
        let mut p = one(0.0);
        let mut s = OptimState::new(&p);
        let g = Tensor::new(&[2], vec![3.0, -0.002]).unwrap();
        let lr = 1e-3;
        let mut last = p.get("w").unwrap().data().to_vec();
        for step in 0..2000 {
            optimizer_step(&mut p, &[g.clone()], &mut s, lr, 0.0, &AdamW::default()).unwrap();
            let now = p.get("w").unwrap().data().to_vec();
            if step > 1000 {
                assert!(((last[0] - now[0]) - lr).abs() < 1e-9 * 1e3 * lr);
                assert!(((now[1] - last[1]) - lr).abs() < 1e-5 * lr);
            }
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = one(0.5);
        let before = p.clone();
        let mut s = OptimState::new(&p);
        let bad = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        let err = optimizer_step(&mut p, &[bad], &mut s, 0.1, 0.0, &AdamW::default()).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = vec![Tensor::new(&[2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut h = vec![Tensor::new(&[1], vec![0.5]).unwrap()];
        clip_grad_norm(&mut h, 0.0);
        assert_eq!(h[0].data(), &[0.5]);
    }
}
