//! Central-difference gradient oracle and gradient comparison reports.
//!
//! Errors are measured norm-wise per component: the largest absolute
//! difference divided by `max(|a|_inf, |b|_inf, REL_FLOOR)`. A per-element
//! denominator would blow up on entries that cancel to nearly zero (the
//! `sum xhat = 0` cancellation produces plenty of those), which says nothing
//! about whether two gradient routes agree.

use serde::Serialize;

use crate::batchnorm::BnGradients;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const REL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub max_rel: f64,
    pub max_abs: f64,
    /// Flat index of the largest absolute difference in the worst component.
    pub worst_index: Option<usize>,
    pub worst_component: Option<String>,
    pub passed: bool,
    pub tolerance: f64,
}

impl CheckReport {
    fn empty(tolerance: f64) -> Self {
        CheckReport {
            max_rel: 0.0,
            max_abs: 0.0,
            worst_index: None,
            worst_component: None,
            passed: true,
            tolerance,
        }
    }

    /// Keeps whichever report has the larger relative error.
    pub fn merge(self, other: CheckReport) -> CheckReport {
        let tolerance = self.tolerance.min(other.tolerance);
        let (mut worst, max_abs) = if other.max_rel > self.max_rel {
            (other.clone(), self.max_abs.max(other.max_abs))
        } else {
            (self.clone(), self.max_abs.max(other.max_abs))
        };
        worst.max_abs = max_abs;
        worst.tolerance = tolerance;
        worst.passed = self.passed && other.passed;
        worst
    }
}

/// Norm-wise relative comparison of two equally sized arrays.
pub fn compare<T: Scalar>(a: &[T], b: &[T], tol: f64) -> Result<CheckReport> {
    if a.len() != b.len() {
        return Err(Error::shape(
            format!("{} elements", a.len()),
            format!("{} elements", b.len()),
        ));
    }
    let mut report = CheckReport::empty(tol);
    let mut scale = REL_FLOOR;
    for (i, (&u, &v)) in a.iter().zip(b).enumerate() {
        let (u, v) = (u.as_f64(), v.as_f64());
        scale = scale.max(u.abs()).max(v.abs());
        let d = (u - v).abs();
        if d > report.max_abs || d.is_nan() {
            report.max_abs = d;
            report.worst_index = Some(i);
        }
    }
    report.max_rel = report.max_abs / scale;
    report.passed = report.max_rel <= tol;
    Ok(report)
}

/// Compares several named components and reports the worst.
pub fn compare_components<T: Scalar>(
    parts: &[(&str, &[T], &[T])],
    tol: f64,
) -> Result<CheckReport> {
    let mut total = CheckReport::empty(tol);
    for &(name, a, b) in parts {
        let mut r = compare(a, b, tol)?;
        r.worst_component = Some(name.to_string());
        total = total.merge(r);
    }
    Ok(total)
}

pub fn check_equivalence<T: Scalar>(
    a: &BnGradients<T>,
    b: &BnGradients<T>,
    tol: f64,
) -> Result<CheckReport> {
    if a.dx.shape() != b.dx.shape() {
        return Err(Error::shape(a.dx.shape(), b.dx.shape()));
    }
    compare_components(
        &[
            ("dx", a.dx.data(), b.dx.data()),
            ("dgamma", &a.dgamma, &b.dgamma),
            ("dbeta", &a.dbeta, &b.dbeta),
        ],
        tol,
    )
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element.
///
/// `f` must recompute everything that depends on its argument; for batch
/// norm that includes the batch statistics.
pub fn fd_gradient_slice<T, F>(mut f: F, x: &[T], step: f64) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = T::of(orig.as_f64() + step);
        let hi = f(&probe)?;
        probe[i] = T::of(orig.as_f64() - step);
        let lo = f(&probe)?;
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!("objective at element {i}")));
        }
        grad.push(T::of((hi - lo) / (2.0 * step)));
    }
    Ok(grad)
}

pub fn fd_gradient<T, F>(mut f: F, x: &Tensor<T>, step: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    let shape = x.shape();
    let grad = fd_gradient_slice(
        |v: &[T]| {
            let t = Tensor::from_vec(shape, v.to_vec())?;
            f(&t)
        },
        x.data(),
        step,
    )?;
    Tensor::from_vec(shape, grad)
}
