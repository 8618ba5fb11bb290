//! Scalar math routed through `libm` so results are identical with and
//! without `std`.

pub use libm::{cos, erf, exp, fabs as abs, floor, log as ln, pow, round, sin, sqrt};

pub const PI: f64 = core::f64::consts::PI;

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(exp(-x))
    } else {
        libm::log1p(exp(x))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}
