use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a central-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    /// `(input, flat index)` of the largest error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    /// Set when a non-finite value was met; the check fails regardless of error.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_err <= self.tol
    }
}

fn eval(f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central finite differences with step `eps` for every input element.
///
/// The denominator of the relative error is floored at 1 so that entries
/// with near-zero gradient are judged by absolute error.
pub fn grad_check(
    f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        tol,
        failure: None,
    };
    if !g.value(out).item().is_finite() {
        report.failure = Some("non-finite function value at the base point".into());
        return Ok(report);
    }
    let mut probe = inputs.to_vec();
    for (which, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        for i in 0..inputs[which].numel() {
            let x0 = inputs[which].data()[i];
            probe[which].data_mut()[i] = x0 + eps;
            let up = eval(f, &probe)?;
            probe[which].data_mut()[i] = x0 - eps;
            let down = eval(f, &probe)?;
            probe[which].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                report.failure = Some(format!(
                    "non-finite derivative at input {which}, index {i} (analytic {a}, numeric {numeric})"
                ));
                return Ok(report);
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (which, i);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
