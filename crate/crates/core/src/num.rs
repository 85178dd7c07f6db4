//! Small numerically-stable scalar helpers shared across modules.

use crate::Real;

/// Logistic function, stable for large |x| (never divides by an overflowed
/// exponential).
#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// ln(1 + e^x) without overflow for large x or cancellation for small x.
#[inline]
pub(crate) fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// ln(sigmoid(x)), computed as -softplus(-x); finite for all finite x.
#[inline]
pub(crate) fn log_sigmoid<F: Real>(x: F) -> F {
    -softplus(-x)
}

/// Inverse of the logistic function. Requires p in (0, 1).
#[inline]
pub(crate) fn logit<F: Real>(p: F) -> F {
    (p / (F::one() - p)).ln()
}

/// sign(x) with the subgradient convention sign(0) = 0.
#[inline]
pub(crate) fn sign<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}
