//! Central-difference gradient checking.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a kink (ReLU, max, hinge, mining switch) lies within `eps`.
    pub kinks: usize,
}

fn evaluate<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    let value = g.value(out);
    if !value.is_scalar() {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    value.item()
}

/// Max relative error between the analytic gradient of `f` at `x` and central differences.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    finite_difference_report(f, x, eps).map(|r| r.max_rel_error)
}

/// Like [`finite_difference_check`], also reporting how many coordinates were compared.
///
/// Per coordinate the error is `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
/// A coordinate whose one-sided differences disagree by more than a smooth function
/// could produce at this step size straddles a kink and is excluded.
pub fn finite_difference_report<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_difference_check", "eps must be positive"));
    }
    if !x.is_finite() {
        return Err(Error::invalid("finite_difference_check", "input is not finite"));
    }
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    let base = g.value(out).item().map_err(|_| Error::NonScalarLoss(g.shape(out).to_vec()))?;
    g.backward(out)?;
    let analytic = g.grad(v).expect("input is a trainable leaf");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kinks: 0,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = evaluate(&f, &probe)?;
        probe.data_mut()[i] = orig;

        let forward = (plus - base) / eps;
        let backward = (base - minus) / eps;
        let numeric = (plus - minus) / (2.0 * eps);
        if (forward - backward).abs() > 1e-3 * numeric.abs().max(1.0) {
            report.kinks += 1;
            continue;
        }
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
