//! Gaussian splat parameters and the covariance factorization.
//!
//! A splat stores its optimizable parameters raw: opacity as a logit,
//! per-axis extents as logs, orientation as a quaternion. Activations map
//! them into valid ranges so gradient steps can never produce a negative
//! scale or an opacity outside (0, 1). The 3D covariance is
//!
//!   Sigma = R S S^T R^T,   S = diag(exp(log_scale)),
//!
//! which is symmetric positive semi-definite for any parameter values.
//!
//! Quaternions are stored [w, x, y, z] and renormalized wherever a rotation
//! matrix is built, so a slightly drifted quaternion still yields a proper
//! rotation.

use serde::{Deserialize, Serialize};
use nalgebra::{Matrix3, Vector3, Vector4};

/// One Gaussian in the local frame of its parent triangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    /// Mean, in the parent triangle's frame.
    pub position: Vector3<f64>,
    /// Orientation quaternion [w, x, y, z]; unit length up to optimizer drift.
    pub rotation: Vector4<f64>,
    /// Log of per-axis standard deviations.
    pub log_scale: Vector3<f64>,
    /// Opacity before the sigmoid.
    pub opacity_logit: f64,
    /// RGB color in [0, 1].
    pub color: Vector3<f64>,
    /// Rig triangle this Gaussian is bound to.
    pub parent_triangle: usize,
}

/// Numerically stable sigmoid; exact at the tails instead of overflowing.
pub fn activate_opacity(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

/// d(sigmoid)/d(logit) expressed through the activated value.
pub fn opacity_activation_derivative(opacity: f64) -> f64 {
    opacity * (1.0 - opacity)
}

/// Rotation matrix of a quaternion [w, x, y, z], normalizing first.
pub fn quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of the unit-quaternion rotation formula with respect
/// to each quaternion lane, evaluated at a unit quaternion. Valid only for
/// tangential directions; radial components are handled by the caller's
/// normalization chain.
pub fn quat_rotation_partials(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Quaternion product a * b, both [w, x, y, z]. Composes rotations so that
/// `quat_to_rotation(a * b) = quat_to_rotation(a) * quat_to_rotation(b)`.
pub fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    Vector4::new(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )
}

/// Quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Vector4<f64> {
    let a = axis.normalize();
    let (s, c) = (angle * 0.5).sin_cos();
    Vector4::new(c, a.x * s, a.y * s, a.z * s)
}

pub fn quat_identity() -> Vector4<f64> {
    Vector4::new(1.0, 0.0, 0.0, 0.0)
}

/// Sigma = R S S^T R^T from raw parameters.
pub fn assemble_covariance(rotation: &Vector4<f64>, log_scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = quat_to_rotation(rotation);
    let s = log_scale.map(f64::exp);
    covariance_from_frame(&r, &s)
}

/// Sigma = R diag(s^2) R^T from an explicit rotation matrix and linear scales.
/// Bound splats use this with the frame-composed rotation and scaled extents.
pub fn covariance_from_frame(rotation: &Matrix3<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let d = Matrix3::from_diagonal(&scale.map(|v| v * v));
    rotation * d * rotation.transpose()
}
