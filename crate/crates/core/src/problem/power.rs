//! Sign-preserving power map and the chain rule that converts ordinary derivatives
//! into derivatives with respect to `[y]^(p-1)`.

use crate::{Matrix, Vector};

/// Default lower bound on `|y_i|` used by the chain-rule helpers.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// `sgn(v) * |v|^rho` for a scalar. Zero maps to zero for every `rho`.
#[inline]
pub fn signed_power_scalar(v: f64, rho: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum() * v.abs().powf(rho)
    }
}

/// Coordinatewise sign-preserving power `[v]^rho`.
pub fn signed_power(v: &Vector, rho: f64) -> Vector {
    v.map(|vi| signed_power_scalar(vi, rho))
}

/// Diagonal of `d y / d [y]^(p-1)`, i.e. `(1/(p-1)) * max(|y_i|, floor)^(2-p)`.
pub fn change_of_variable_scale(y: &Vector, p: f64, floor: f64) -> Vector {
    let inv = 1.0 / (p - 1.0);
    y.map(|yi| inv * yi.abs().max(floor).powf(2.0 - p))
}

/// Converts `grad_y f` into `df / d[y]^(p-1)`.
pub fn chain_rule_generalized_grad(grad_y: &Vector, y: &Vector, p: f64, floor: f64) -> Vector {
    change_of_variable_scale(y, p, floor).component_mul(grad_y)
}

/// Converts the Hessian `grad_yy g` into `d grad_y g / d[y]^(p-1)`.
///
/// The result is `hess_yy * diag(s)` with `s` from [`change_of_variable_scale`], so entry
/// `(i, j)` is the derivative of the `i`-th gradient component with respect to the
/// `j`-th transformed coordinate.
pub fn chain_rule_generalized_jacobian(hess_yy: &Matrix, y: &Vector, p: f64, floor: f64) -> Matrix {
    let scale = change_of_variable_scale(y, p, floor);
    let mut out = hess_yy.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= scale[j];
    }
    out
}
