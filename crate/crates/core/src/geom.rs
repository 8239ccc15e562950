//! Small fixed-size vector helpers for 3D geometry.

use num_traits::Float;

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm_sq(a: Vec3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    Float::sqrt(norm_sq(a))
}

/// Unit vector along `a`, or `None` when `a` is (numerically) zero.
#[inline]
pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    if n > 1e-300 && n.is_finite() {
        Some(scale(a, 1.0 / n))
    } else {
        None
    }
}

#[inline]
pub fn dist_sq(a: Vec3, b: Vec3) -> f64 {
    norm_sq(sub(a, b))
}

/// Rotation of `p` by `angle` radians about coordinate axis `axis` (0=x, 1=y, 2=z),
/// right-handed.
pub fn rotate_about_axis(p: Vec3, axis: usize, angle: f64) -> Vec3 {
    let (s, c) = (Float::sin(angle), Float::cos(angle));
    match axis {
        0 => [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]],
        1 => [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]],
        _ => [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]],
    }
}
