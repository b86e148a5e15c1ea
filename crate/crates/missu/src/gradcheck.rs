//! Finite-difference verification of analytic gradients.
//!
//! Central differences in f64 with a combined relative/absolute criterion:
//! the absolute floor absorbs cancellation noise on parameters whose true
//! gradient is exactly zero (e.g. a conv bias feeding a mean-subtracting
//! norm).

use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-8;

/// Relative error with the absolute floor folded in; < 1 means acceptable
/// at (REL_TOL, ABS_TOL).
pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_TOL {
        return 0.0;
    }
    diff / (REL_TOL * analytic.abs().max(numeric.abs()).max(ABS_TOL / REL_TOL))
}

pub fn matches(analytic: f64, numeric: f64) -> bool {
    scaled_error(analytic, numeric) < 1.0
}

/// Central difference of a scalar function w.r.t. one element of `x`.
pub fn central_diff<F: FnMut(&Tensor) -> f64>(mut f: F, x: &Tensor, idx: usize, eps: f64) -> f64 {
    let mut xp = x.clone();
    xp.data_mut()[idx] += eps;
    let mut xm = x.clone();
    xm.data_mut()[idx] -= eps;
    (f(&xp) - f(&xm)) / (2.0 * eps)
}
