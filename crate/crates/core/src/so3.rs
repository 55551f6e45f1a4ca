//! Small SO(3)/SE(3) helpers on top of nalgebra.

use nalgebra::{Isometry3, Matrix3, Translation3, UnitQuaternion, Vector3};

/// Skew-symmetric cross-product matrix, `skew(a) * b == a.cross(&b)`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
pub fn exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*phi)
}

#[inline]
pub fn log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    q.scaled_axis()
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let w = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() + 0.5 * w + (1.0 / 12.0) * w * w;
    }
    let coef = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * w + coef * w * w
}

/// Interpolates between two poses: slerp on rotation, linear on translation.
pub fn interpolate(a: &Isometry3<f64>, b: &Isometry3<f64>, s: f64) -> Isometry3<f64> {
    if a == b {
        return *a;
    }
    let rotation = a.rotation.slerp(&b.rotation, s);
    let translation = a.translation.vector.lerp(&b.translation.vector, s);
    Isometry3::from_parts(Translation3::from(translation), rotation)
}
