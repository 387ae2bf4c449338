//! Shared geometry aliases and small helpers.

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
pub type Mat4 = nalgebra::Matrix4<f64>;

/// Rotation about the world vertical (+Y) axis: azimuth increases by `angle`.
pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

pub fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Reinhard compression followed by gamma 1/2.2. Maps linear HDR radiance
/// into [0, 1); the same transform is used for the low-range lighting map,
/// network inputs, and 8-bit previews.
pub fn tonemap(x: f64) -> f64 {
    let x = x.max(0.0);
    (x / (1.0 + x)).powf(1.0 / 2.2)
}
