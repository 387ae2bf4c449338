//! Pinhole cameras, hemisphere pose sampling, and Plücker ray maps.
//!
//! Camera space is right-handed: +X right, +Y up, looking along −Z. Pixel
//! (i, j) indexes column i from the left and row j from the top; rays pass
//! through pixel centers.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::math::{Mat3, Mat4, Vec3};

#[derive(Debug, Clone)]
pub struct Camera {
    /// Rigid cam-to-world transform; rotation block orthonormal, det +1.
    pub cam_to_world: Mat4,
    /// Vertical field of view in degrees, in [10, 120].
    pub fov_y: f64,
    /// (width, height) in pixels.
    pub resolution: (usize, usize),
}

impl Camera {
    pub fn new(cam_to_world: Mat4, fov_y: f64, resolution: (usize, usize)) -> Result<Self> {
        let r = cam_to_world.fixed_view::<3, 3>(0, 0).into_owned();
        let ortho_err = (r * r.transpose() - Mat3::identity())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if ortho_err > 1e-6 {
            return Err(CoreError::Geometry(format!(
                "rotation block not orthonormal (err {ortho_err:.2e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(CoreError::Geometry("rotation block must have det +1".into()));
        }
        if !(10.0..=120.0).contains(&fov_y) {
            return Err(CoreError::Config(format!("fov_y {fov_y} outside [10, 120]")));
        }
        if resolution.0 == 0 || resolution.1 == 0 {
            return Err(CoreError::Config("zero resolution".into()));
        }
        Ok(Self { cam_to_world, fov_y, resolution })
    }

    pub fn look_at(eye: Vec3, target: Vec3, fov_y: f64, resolution: (usize, usize)) -> Result<Self> {
        let back = eye - target;
        if back.norm() < 1e-9 {
            return Err(CoreError::Geometry("eye coincides with target".into()));
        }
        let z = back.normalize();
        let up = Vec3::new(0.0, 1.0, 0.0);
        let x_raw = up.cross(&z);
        if x_raw.norm() < 1e-9 {
            return Err(CoreError::Geometry("view direction parallel to up".into()));
        }
        let x = x_raw.normalize();
        let y = z.cross(&x);
        let mut m = Mat4::identity();
        for i in 0..3 {
            m[(i, 0)] = x[i];
            m[(i, 1)] = y[i];
            m[(i, 2)] = z[i];
            m[(i, 3)] = eye[i];
        }
        Self::new(m, fov_y, resolution)
    }

    pub fn position(&self) -> Vec3 {
        Vec3::new(self.cam_to_world[(0, 3)], self.cam_to_world[(1, 3)], self.cam_to_world[(2, 3)])
    }

    pub fn rotation(&self) -> Mat3 {
        self.cam_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Camera forward axis (−Z column) in world space.
    pub fn forward(&self) -> Vec3 {
        -Vec3::new(self.cam_to_world[(0, 2)], self.cam_to_world[(1, 2)], self.cam_to_world[(2, 2)])
    }

    pub fn with_resolution(&self, resolution: (usize, usize)) -> Self {
        Self { resolution, ..self.clone() }
    }
}

/// Deterministic look-at-origin poses on the upper hemisphere, elevation in
/// [5°, 85°].
pub fn sample_hemisphere_poses(n: usize, radius: f64, seed: u64) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(CoreError::Config("need at least one pose".into()));
    }
    if radius <= 0.0 {
        return Err(CoreError::Config("radius must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let azim: f64 = rng.random_range(0.0..2.0 * PI);
            let elev: f64 = rng.random_range(5.0..85.0) * PI / 180.0;
            let eye = Vec3::new(
                radius * elev.cos() * azim.sin(),
                radius * elev.sin(),
                radius * elev.cos() * azim.cos(),
            );
            Camera::look_at(eye, Vec3::zeros(), 50.0, (64, 64))
        })
        .collect()
}

/// Ray through the center of pixel (i, j): world-space origin and unit
/// direction.
pub fn ray_for_pixel(camera: &Camera, i: usize, j: usize) -> Result<(Vec3, Vec3)> {
    let (w, h) = camera.resolution;
    if i >= w || j >= h {
        return Err(CoreError::Bounds(format!("pixel ({i},{j}) outside {w}x{h}")));
    }
    let tan_half = (camera.fov_y.to_radians() * 0.5).tan();
    let aspect = w as f64 / h as f64;
    let x_ndc = ((i as f64 + 0.5) / w as f64) * 2.0 - 1.0;
    let y_ndc = 1.0 - ((j as f64 + 0.5) / h as f64) * 2.0;
    let dir_cam = Vec3::new(x_ndc * aspect * tan_half, y_ndc * tan_half, -1.0).normalize();
    Ok((camera.position(), camera.rotation() * dir_cam))
}

/// H×W×6 per-pixel (d, m = o×d) with unit d.
#[derive(Debug, Clone)]
pub struct PluckerMap {
    pub map: Array3<f64>,
}

pub fn plucker_from_ray(origin: Vec3, dir: Vec3) -> (Vec3, Vec3) {
    let d = dir.normalize();
    (d, origin.cross(&d))
}

pub fn plucker_map(camera: &Camera, w: usize, h: usize) -> Result<PluckerMap> {
    let cam = camera.with_resolution((w, h));
    let mut map = Array3::<f64>::zeros((h, w, 6));
    for j in 0..h {
        for i in 0..w {
            let (o, dir) = ray_for_pixel(&cam, i, j)?;
            let (d, m) = plucker_from_ray(o, dir);
            for c in 0..3 {
                map[[j, i, c]] = d[c];
                map[[j, i, 3 + c]] = m[c];
            }
        }
    }
    Ok(PluckerMap { map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hemisphere_poses_on_sphere_looking_at_origin() {
        let poses = sample_hemisphere_poses(8, 2.5, 4).unwrap();
        assert_eq!(poses.len(), 8);
        for cam in &poses {
            let o = cam.position();
            assert_abs_diff_eq!(o.norm(), 2.5, epsilon = 1e-6);
            let fwd = cam.forward();
            let to_origin = (-o).normalize();
            let ang = fwd.dot(&to_origin).clamp(-1.0, 1.0).acos();
            assert!(ang <= 1e-6, "forward misses origin by {ang} rad");
            let elev = (o.y / o.norm()).asin().to_degrees();
            assert!((5.0..=85.0).contains(&elev));
        }
    }

    #[test]
    fn hemisphere_poses_seeded() {
        let a = sample_hemisphere_poses(8, 2.5, 4).unwrap();
        let b = sample_hemisphere_poses(8, 2.5, 4).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.cam_to_world, y.cam_to_world);
        }
        let c = sample_hemisphere_poses(8, 2.5, 5).unwrap();
        assert!(
            a.iter().zip(c.iter()).any(|(x, y)| x.cam_to_world != y.cam_to_world),
            "different seeds produced identical pose sets"
        );
    }

    #[test]
    fn center_pixel_ray_is_forward() {
        let cam = Camera::look_at(Vec3::new(1.0, 2.0, 3.0), Vec3::zeros(), 60.0, (33, 33)).unwrap();
        let (o, d) = ray_for_pixel(&cam, 16, 16).unwrap();
        assert_abs_diff_eq!((o - cam.position()).norm(), 0.0);
        assert!((d - cam.forward()).norm() <= 1e-12);
    }

    #[test]
    fn rays_unit_norm_and_bounds_checked() {
        let cam = Camera::look_at(Vec3::new(0.0, 1.0, 4.0), Vec3::zeros(), 45.0, (7, 5)).unwrap();
        for j in 0..5 {
            for i in 0..7 {
                let (_, d) = ray_for_pixel(&cam, i, j).unwrap();
                assert_abs_diff_eq!(d.norm(), 1.0, epsilon = 1e-12);
            }
        }
        assert!(matches!(ray_for_pixel(&cam, 7, 0), Err(CoreError::Bounds(_))));
        assert!(matches!(ray_for_pixel(&cam, 0, 5), Err(CoreError::Bounds(_))));
    }

    #[test]
    fn halving_fov_shrinks_corner_angle() {
        let mk = |fov| Camera::look_at(Vec3::new(0.0, 0.5, 3.0), Vec3::zeros(), fov, (16, 16)).unwrap();
        let corner_angle = |cam: &Camera| {
            let (_, d) = ray_for_pixel(cam, 0, 0).unwrap();
            d.dot(&cam.forward()).clamp(-1.0, 1.0).acos()
        };
        let wide = corner_angle(&mk(80.0));
        let narrow = corner_angle(&mk(40.0));
        assert!(narrow < wide, "expected {narrow} < {wide}");
    }

    #[test]
    fn plucker_zero_moment_for_origin_camera() {
        let cam = Camera::new(Mat4::identity(), 50.0, (8, 8)).unwrap();
        let pm = plucker_map(&cam, 8, 8).unwrap();
        for j in 0..8 {
            for i in 0..8 {
                for c in 3..6 {
                    assert_abs_diff_eq!(pm.map[[j, i, c]], 0.0);
                }
            }
        }
    }

    #[test]
    fn plucker_invariant_under_slide_along_ray() {
        let o = Vec3::new(0.7, -1.2, 2.0);
        let dir = Vec3::new(0.3, 0.9, -0.2).normalize();
        let (d0, m0) = plucker_from_ray(o, dir);
        for lambda in [-3.0, 0.5, 10.0] {
            let (d1, m1) = plucker_from_ray(o + lambda * dir, dir);
            assert!((d1 - d0).norm() <= 1e-12);
            assert!((m1 - m0).norm() <= 1e-12);
        }
    }

    #[test]
    fn plucker_invariants_hold() {
        let cam = Camera::look_at(Vec3::new(1.5, 2.0, -1.0), Vec3::zeros(), 55.0, (16, 16)).unwrap();
        let pm = plucker_map(&cam, 16, 16).unwrap();
        for j in 0..16 {
            for i in 0..16 {
                let d = Vec3::new(pm.map[[j, i, 0]], pm.map[[j, i, 1]], pm.map[[j, i, 2]]);
                let m = Vec3::new(pm.map[[j, i, 3]], pm.map[[j, i, 4]], pm.map[[j, i, 5]]);
                assert_abs_diff_eq!(d.norm(), 1.0, epsilon = 1e-6);
                assert!(d.dot(&m).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn plucker_equivariant_under_rigid_transform() {
        let cam = Camera::look_at(Vec3::new(2.0, 1.0, 2.0), Vec3::zeros(), 50.0, (10, 10)).unwrap();
        // An arbitrary rigid transform T = (R, t).
        let rot = crate::math::rot_y(0.83)
            * nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), 0.31).into_inner();
        let t = Vec3::new(0.4, -0.6, 1.1);
        let mut tf = Mat4::identity();
        for r in 0..3 {
            for c in 0..3 {
                tf[(r, c)] = rot[(r, c)];
            }
            tf[(r, 3)] = t[r];
        }
        let moved = Camera::new(tf * cam.cam_to_world, cam.fov_y, cam.resolution).unwrap();
        let pm0 = plucker_map(&cam, 10, 10).unwrap();
        let pm1 = plucker_map(&moved, 10, 10).unwrap();
        for j in 0..10 {
            for i in 0..10 {
                let d = Vec3::new(pm0.map[[j, i, 0]], pm0.map[[j, i, 1]], pm0.map[[j, i, 2]]);
                let m = Vec3::new(pm0.map[[j, i, 3]], pm0.map[[j, i, 4]], pm0.map[[j, i, 5]]);
                let d_want = rot * d;
                let m_want = rot * m + t.cross(&d_want);
                let d_got = Vec3::new(pm1.map[[j, i, 0]], pm1.map[[j, i, 1]], pm1.map[[j, i, 2]]);
                let m_got = Vec3::new(pm1.map[[j, i, 3]], pm1.map[[j, i, 4]], pm1.map[[j, i, 5]]);
                assert!((d_got - d_want).norm() <= 1e-6);
                assert!((m_got - m_want).norm() <= 1e-6);
            }
        }
    }
}
