//! Rotation-group helpers: hat map, exponential and logarithm, and the inverse
//! right Jacobian used to differentiate orientation residuals.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

/// Cross-product matrix: `hat(a) * b == a × b`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn exp(w: &Vector3<f64>) -> Rotation3<f64> {
    Rotation3::from_scaled_axis(*w)
}

/// Rotation vector of `r`, with angle in `[0, π]`.
///
/// Goes through the unit quaternion, which keeps the axis well conditioned as
/// the angle approaches π where the trace formula loses it.
pub fn log(r: &Rotation3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(r).into_inner();
    let (w, v) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let s = v.norm();
    if s < 1e-8 {
        // angle = 2 atan2(s, w) ≈ 2 s / w
        return v * (2.0 / w);
    }
    v * (2.0 * s.atan2(w) / s)
}

/// Relative rotation residual `r1 ⊖ r2 = log(r1ᵀ r2)`.
pub fn box_minus(r1: &Rotation3<f64>, r2: &Rotation3<f64>) -> Vector3<f64> {
    log(&(r1.inverse() * r2))
}

/// Inverse of the right Jacobian of the exponential map at `w`.
pub fn right_jacobian_inverse(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = hat(w);
    let coeff = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + 0.5 * wx + coeff * wx * wx
}
