//! Central finite-difference verification of analytic gradients.

use super::{no_grad, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamRegistry;

/// Denominator floor for [`relative_error`]. Below this magnitude the check
/// degrades to an absolute comparison (`tol * GRAD_FLOOR`), since a pure
/// relative error between two near-zero numbers is dominated by round-off.
pub const GRAD_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub trainable: bool,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error > self.tol)
    }

    /// The `n` parameters with the largest errors, worst first.
    pub fn worst(&self, n: usize) -> Vec<&ParamCheck> {
        let mut v: Vec<&ParamCheck> = self.params.iter().collect();
        v.sort_by(|a, b| b.max_rel_error.total_cmp(&a.max_rel_error));
        v.truncate(n);
        v
    }

    pub fn max_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Central-difference gradient of `f` with respect to every element of `x`.
pub(crate) fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut() -> f64) -> Vec<f64> {
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = x.data()[i];
        x.update(|d| d[i] = orig + h);
        let plus = f();
        x.update(|d| d[i] = orig - h);
        let minus = f();
        x.update(|d| d[i] = orig);
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Compares the analytic gradient of the scalar `f` against central differences
/// for every trainable parameter in `params`.
///
/// `f` must be deterministic: it is evaluated twice up front and any difference
/// is reported as a usage error (usually a forward pass with dropout left on).
/// Frozen parameters are listed in the report with zero error.
pub fn finite_diff_check<F>(mut f: F, params: &ParamRegistry, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    let first = no_grad(&mut f)?.item()?;
    let second = no_grad(&mut f)?.item()?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::usage(format!(
            "function is not deterministic ({first} vs {second}); disable dropout"
        )));
    }
    if !first.is_finite() {
        return Err(Error::Numeric(format!("loss is {first}")));
    }

    params.zero_grad();
    f()?.backward()?;

    let mut checks = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let trainable = tensor.requires_grad();
        let mut check = ParamCheck {
            name: name.to_string(),
            numel: tensor.numel(),
            trainable,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        if trainable {
            let analytic = tensor.grad().unwrap_or_else(|| vec![0.0; tensor.numel()]);
            let mut failure = None;
            let numeric = numeric_gradient(tensor, h, || match no_grad(&mut f).and_then(|t| t.item()) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
            for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
                let err = relative_error(a, n);
                if err > check.max_rel_error || err.is_nan() {
                    check.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                    check.worst_index = i;
                    check.analytic = a;
                    check.numeric = n;
                }
            }
        }
        checks.push(check);
    }
    params.zero_grad();
    Ok(GradCheckReport { h, tol, params: checks })
}
