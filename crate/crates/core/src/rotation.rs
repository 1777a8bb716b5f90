//! Rotation parameterizations used by the hand model: axis-angle (per joint)
//! and quaternions (global orientation), each with analytic derivatives.

use nalgebra::{Matrix3, Vector3};

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Coefficients of `R = I + a [r]x + b [r]x^2` and of their derivatives
/// divided by theta, with series expansions near zero.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64, f64) {
    if theta < 1e-2 {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (
            s / theta,
            (1.0 - c) / t2,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

/// Axis-angle vector to rotation matrix.
pub fn rodrigues(r: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _, _) = rodrigues_coefficients(r.norm());
    let k = skew(r);
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation matrix plus its partial derivatives with respect to the three
/// axis-angle components.
pub fn rodrigues_with_jacobian(r: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let (a, b, da, db) = rodrigues_coefficients(r.norm());
    let k = skew(r);
    let k2 = k * k;
    let rot = Matrix3::identity() + k * a + k2 * b;
    let mut d = [Matrix3::zeros(); 3];
    for (c, dc) in d.iter_mut().enumerate() {
        let e = skew(&Vector3::ith(c, 1.0));
        *dc = k * (da * r[c]) + e * a + k2 * (db * r[c]) + (e * k + k * e) * b;
    }
    (rot, d)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
fn unit_quat_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
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

pub fn normalize_quat(q: &[f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of `q / |q|`. The quaternion does not need to be unit
/// length; normalization is part of the map.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    unit_quat_matrix(&normalize_quat(q))
}

/// Rotation of `q / |q|` and its derivatives with respect to the four raw
/// (unnormalized) quaternion components.
pub fn quat_to_matrix_with_jacobian(q: &[f64; 4]) -> (Matrix3<f64>, [Matrix3<f64>; 4]) {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    let [w, x, y, z] = u;
    let rot = unit_quat_matrix(&u);
    // derivatives of the polynomial map with respect to unit components
    let du = [
        Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0),
        Matrix3::new(
            0.0,
            2.0 * y,
            2.0 * z,
            2.0 * y,
            -4.0 * x,
            -2.0 * w,
            2.0 * z,
            2.0 * w,
            -4.0 * x,
        ),
        Matrix3::new(
            -4.0 * y,
            2.0 * x,
            2.0 * w,
            2.0 * x,
            0.0,
            2.0 * z,
            -2.0 * w,
            2.0 * z,
            -4.0 * y,
        ),
        Matrix3::new(
            -4.0 * z,
            -2.0 * w,
            2.0 * x,
            2.0 * w,
            -4.0 * z,
            2.0 * y,
            2.0 * x,
            2.0 * y,
            0.0,
        ),
    ];
    let mut d = [Matrix3::zeros(); 4];
    for (m, dm) in d.iter_mut().enumerate() {
        for n in 0..4 {
            let proj = (if n == m { 1.0 } else { 0.0 }) - u[n] * u[m];
            *dm += du[n] * (proj / norm);
        }
    }
    (rot, d)
}

pub fn quat_mul(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Quaternion of `Rz(gamma) * Ry(beta) * Rx(alpha)`.
pub fn euler_zyx_quat(alpha: f64, beta: f64, gamma: f64) -> [f64; 4] {
    let (sa, ca) = (alpha * 0.5).sin_cos();
    let (sb, cb) = (beta * 0.5).sin_cos();
    let (sg, cg) = (gamma * 0.5).sin_cos();
    let qx = [ca, sa, 0.0, 0.0];
    let qy = [cb, 0.0, sb, 0.0];
    let qz = [cg, 0.0, 0.0, sg];
    quat_mul(&quat_mul(&qz, &qy), &qx)
}

/// Wraps an axis-angle vector so that its magnitude is at most pi while
/// representing the same rotation.
pub fn wrap_axis_angle(r: &Vector3<f64>) -> Vector3<f64> {
    let theta = r.norm();
    if theta <= std::f64::consts::PI {
        return *r;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let wrapped = theta - two_pi * (theta / two_pi).round();
    r * (wrapped / theta)
}
