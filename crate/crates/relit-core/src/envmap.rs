//! HDR equirectangular environment maps and lighting conditioning.
//!
//! Maps are `H_e × W_e × 3` linear radiance with `W_e = 2·H_e`, y-up. Pixel
//! `(i, j)` covers `u = (i+0.5)/W_e`, `v = (j+0.5)/H_e` with azimuth
//! `φ = 2πu − π`, inclination `θ = πv` and direction
//! `d = (sinθ·sinφ, cosθ, sinθ·cosφ)`.

use std::f64::consts::PI;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::math::{clamp01, Vec3};

#[derive(Debug, Clone)]
pub struct EnvMap {
    /// Linear HDR radiance, shape (H_e, W_e, 3), all finite and ≥ 0.
    pub radiance: Array3<f32>,
    pub id: String,
}

impl EnvMap {
    pub fn new(radiance: Array3<f32>, id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = radiance.dim();
        if c != 3 || w != 2 * h || h == 0 {
            return Err(CoreError::Shape(format!(
                "env map must be H×2H×3, got {h}×{w}×{c}"
            )));
        }
        if radiance.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::Data("env map has negative or non-finite radiance".into()));
        }
        Ok(Self { radiance, id: id.into() })
    }

    pub fn height(&self) -> usize {
        self.radiance.dim().0
    }

    pub fn width(&self) -> usize {
        self.radiance.dim().1
    }
}

/// (E^H, E^L, E_dir): normalized, tonemapped, and direction conditioning maps.
#[derive(Debug, Clone)]
pub struct LightingConditioning {
    /// radiance / max(radiance), in [0, 1].
    pub e_high: Array3<f32>,
    /// Reinhard x/(1+x) then gamma 1/2.2, in [0, 1].
    pub e_low: Array3<f32>,
    /// Unit view directions per texel.
    pub e_dir: Array3<f32>,
}

/// Unit direction through the center of texel (i, j).
pub fn direction_for_pixel(w_e: usize, h_e: usize, i: usize, j: usize) -> Vec3 {
    let u = (i as f64 + 0.5) / w_e as f64;
    let v = (j as f64 + 0.5) / h_e as f64;
    let phi = 2.0 * PI * u - PI;
    let theta = PI * v;
    Vec3::new(
        theta.sin() * phi.sin(),
        theta.cos(),
        theta.sin() * phi.cos(),
    )
}

/// Grid of unit directions, shape (H_e, W_e, 3).
pub fn direction_map(w_e: usize, h_e: usize) -> Array3<f64> {
    let mut out = Array3::zeros((h_e, w_e, 3));
    for j in 0..h_e {
        for i in 0..w_e {
            let d = direction_for_pixel(w_e, h_e, i, j);
            out[[j, i, 0]] = d.x;
            out[[j, i, 1]] = d.y;
            out[[j, i, 2]] = d.z;
        }
    }
    out
}

/// Solid angle subtended by any texel in row j: (2π/W_e)·(π/H_e)·sinθ_j.
pub fn texel_solid_angle(w_e: usize, h_e: usize, j: usize) -> f64 {
    let theta = PI * (j as f64 + 0.5) / h_e as f64;
    (2.0 * PI / w_e as f64) * (PI / h_e as f64) * theta.sin()
}

/// Procedural sky-gradient-plus-light-blobs environment. Deterministic per
/// seed; 1–4 Gaussian blobs with pairwise angular separation ≥ 1 rad and
/// peak radiance in [2, 50].
pub fn make_procedural_env(seed: u64, h_e: usize) -> Result<EnvMap> {
    if h_e < 8 {
        return Err(CoreError::Config(format!("env height {h_e} < 8")));
    }
    let w_e = 2 * h_e;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ground: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.3));
    let sky: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..1.0));

    let n_blobs = rng.random_range(1..=4usize);
    // Keep blob sigmas resolvable at this resolution so each blob produces a
    // single clean local maximum; keep centers off the poles.
    let sigma_lo = (0.12f64).max(1.5 * PI / h_e as f64);
    let sigma_hi = (0.25f64).max(2.0 * PI / h_e as f64);
    let mut centers: Vec<Vec3> = Vec::new();
    for _attempt in 0..1000 {
        centers.clear();
        for _ in 0..n_blobs {
            let y: f64 = rng.random_range(-0.9..0.9);
            let phi: f64 = rng.random_range(-PI..PI);
            let r = (1.0 - y * y).sqrt();
            centers.push(Vec3::new(r * phi.sin(), y, r * phi.cos()));
        }
        let ok = centers.iter().enumerate().all(|(a, ca)| {
            centers[a + 1..]
                .iter()
                .all(|cb| ca.dot(cb).clamp(-1.0, 1.0).acos() >= 1.0)
        });
        if ok {
            break;
        }
    }
    let blobs: Vec<(Vec3, f64, [f64; 3])> = centers
        .into_iter()
        .map(|c| {
            let sigma = rng.random_range(sigma_lo..sigma_hi);
            let peak = rng.random_range(2.5..45.0);
            let mut tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
            let m = tint.iter().cloned().fold(f64::MIN, f64::max);
            tint.iter_mut().for_each(|t| *t /= m);
            (c, sigma, [peak * tint[0], peak * tint[1], peak * tint[2]])
        })
        .collect();

    let mut radiance = Array3::<f32>::zeros((h_e, w_e, 3));
    for j in 0..h_e {
        for i in 0..w_e {
            let d = direction_for_pixel(w_e, h_e, i, j);
            let t = clamp01(0.5 * d.y + 0.5);
            let mut rgb = [0.0f64; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                *v = ground[c] + (sky[c] - ground[c]) * t;
            }
            for (center, sigma, peak) in &blobs {
                let ang = d.dot(center).clamp(-1.0, 1.0).acos();
                let g = (-0.5 * (ang / sigma).powi(2)).exp();
                for (c, v) in rgb.iter_mut().enumerate() {
                    *v += peak[c] * g;
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                radiance[[j, i, c]] = *v as f32;
            }
        }
    }
    EnvMap::new(radiance, format!("env-{seed}"))
}

/// Normalized / tonemapped / direction conditioning triple.
pub fn process_env(env: &EnvMap) -> Result<LightingConditioning> {
    let max = env.radiance.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Err(CoreError::DegenerateLighting("all-zero environment map".into()));
    }
    let e_high = env.radiance.mapv(|v| (v as f64 / max as f64) as f32);
    let e_low = env.radiance.mapv(|v| {
        let x = v as f64;
        clamp01(x / (1.0 + x)).powf(1.0 / 2.2) as f32
    });
    let e_dir = direction_map(env.width(), env.height()).mapv(|v| v as f32);
    Ok(LightingConditioning { e_high, e_low, e_dir })
}

/// Azimuthal rotation by the nearest texel-aligned shift, then an optional
/// horizontal mirror. Pure texel permutation, so total energy is preserved
/// exactly. Content rotates by +yaw about +Y: sample(rotate(e, φ), d) equals
/// sample(e, rot_y(−φ)·d) for texel-aligned φ.
pub fn rotate_flip(env: &EnvMap, yaw: f64, flip: bool) -> EnvMap {
    let (h, w, _) = env.radiance.dim();
    let shift = (yaw / (2.0 * PI) * w as f64).round().rem_euclid(w as f64) as usize;
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for j in 0..h {
        for i in 0..w {
            let src = (i + w - shift) % w;
            let dst = if flip { w - 1 - i } else { i };
            for c in 0..3 {
                out[[j, dst, c]] = env.radiance[[j, src, c]];
            }
        }
    }
    EnvMap { radiance: out, id: env.id.clone() }
}

/// Bilinear radiance lookup in the inverse of the direction_map convention.
/// Wraps horizontally, clamps vertically at the poles.
pub fn sample_radiance(env: &EnvMap, d: Vec3) -> Result<[f64; 3]> {
    if (d.norm() - 1.0).abs() > 1e-6 {
        return Err(CoreError::Geometry(format!("non-unit direction |d|={}", d.norm())));
    }
    let (h, w, _) = env.radiance.dim();
    let theta = d.y.clamp(-1.0, 1.0).acos();
    let phi = d.x.atan2(d.z);
    let u = (phi + PI) / (2.0 * PI);
    let v = theta / PI;
    let x = (u * w as f64 - 0.5).rem_euclid(w as f64);
    let y = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize % w;
    let x1 = (x0 + 1) % w;
    let tx = x - x.floor();
    let y0 = y.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let ty = y - y.floor();
    let mut rgb = [0.0f64; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let v00 = env.radiance[[y0, x0, c]] as f64;
        let v01 = env.radiance[[y0, x1, c]] as f64;
        let v10 = env.radiance[[y1, x0, c]] as f64;
        let v11 = env.radiance[[y1, x1, c]] as f64;
        let top = v00 + (v01 - v00) * tx;
        let bot = v10 + (v11 - v10) * tx;
        *out = top + (bot - top) * ty;
    }
    Ok(rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rot_y;
    use approx::assert_abs_diff_eq;

    /// Independent blob counter: strict local maxima (8-neighborhood with
    /// horizontal wrap) of the per-texel max channel, above the sky ceiling.
    fn count_blobs(env: &EnvMap) -> usize {
        let (h, w, _) = env.radiance.dim();
        let lum = |j: usize, i: usize| -> f32 {
            (0..3).map(|c| env.radiance[[j, i, c]]).fold(f32::MIN, f32::max)
        };
        let mut count = 0;
        for j in 0..h {
            for i in 0..w {
                let v = lum(j, i);
                if v <= 1.5 {
                    continue;
                }
                let mut is_max = true;
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        if dj == 0 && di == 0 {
                            continue;
                        }
                        let nj = j as i64 + dj;
                        if nj < 0 || nj >= h as i64 {
                            continue;
                        }
                        let ni = (i as i64 + di).rem_euclid(w as i64) as usize;
                        if lum(nj as usize, ni) >= v {
                            is_max = false;
                        }
                    }
                }
                if is_max {
                    count += 1;
                }
            }
        }
        count
    }

    #[test]
    fn procedural_env_shape_and_peak_bounds() {
        let env = make_procedural_env(3, 32).unwrap();
        assert_eq!(env.radiance.dim(), (32, 64, 3));
        let max = env.radiance.iter().cloned().fold(f32::MIN, f32::max);
        assert!((2.0..=50.0).contains(&max), "max {max} outside [2,50]");
    }

    #[test]
    fn procedural_env_deterministic() {
        let a = make_procedural_env(42, 16).unwrap();
        let b = make_procedural_env(42, 16).unwrap();
        assert_eq!(a.radiance, b.radiance);
    }

    #[test]
    fn procedural_env_rejects_tiny() {
        assert!(matches!(make_procedural_env(0, 7), Err(CoreError::Config(_))));
    }

    #[test]
    fn procedural_env_blob_count_varies() {
        let mut counts = std::collections::BTreeSet::new();
        for seed in 0..100 {
            let env = make_procedural_env(seed, 32).unwrap();
            let n = count_blobs(&env);
            assert!((1..=4).contains(&n), "seed {seed}: counted {n} blobs");
            counts.insert(n);
        }
        assert!(counts.len() >= 2, "only saw blob counts {counts:?}");
    }

    #[test]
    fn process_env_constant_gives_all_ones_e_high() {
        let env = EnvMap::new(Array3::from_elem((8, 16, 3), 5.0), "c").unwrap();
        let cond = process_env(&env).unwrap();
        for v in cond.e_high.iter() {
            assert_abs_diff_eq!(*v, 1.0);
        }
    }

    #[test]
    fn process_env_e_low_matches_reinhard_gamma() {
        let env = EnvMap::new(Array3::from_elem((8, 16, 3), 1.0), "c").unwrap();
        let cond = process_env(&env).unwrap();
        let want = 0.5f64.powf(1.0 / 2.2); // ≈ 0.7297
        assert_abs_diff_eq!(cond.e_low[[0, 0, 0]] as f64, want, epsilon = 1e-6);
        assert_abs_diff_eq!(want, 0.7297, epsilon = 1e-4);
    }

    #[test]
    fn process_env_e_high_scale_invariant() {
        let base = make_procedural_env(7, 16).unwrap();
        let scaled = EnvMap::new(base.radiance.mapv(|v| v * 10.0), "x10").unwrap();
        let a = process_env(&base).unwrap();
        let b = process_env(&scaled).unwrap();
        for (x, y) in a.e_high.iter().zip(b.e_high.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-6);
        }
    }

    #[test]
    fn process_env_rejects_all_zero() {
        let env = EnvMap::new(Array3::zeros((8, 16, 3)), "z").unwrap();
        assert!(matches!(process_env(&env), Err(CoreError::DegenerateLighting(_))));
    }

    #[test]
    fn e_low_monotone_in_radiance() {
        let f = |x: f32| {
            let env = EnvMap::new(Array3::from_elem((8, 16, 3), x), "m").unwrap();
            process_env(&env).unwrap().e_low[[0, 0, 0]]
        };
        let mut prev = f(0.01);
        for i in 1..50 {
            let cur = f(0.01 + i as f32 * 0.37);
            assert!(cur >= prev);
            prev = cur;
        }
    }

    #[test]
    fn direction_map_center_and_pole() {
        // Odd grid so u = v = 0.5 lands exactly on a texel center.
        let d = direction_for_pixel(9, 5, 4, 2);
        assert_abs_diff_eq!(d.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.z, 1.0, epsilon = 1e-12);
        // v → 0 tends to the +Y pole.
        let top = direction_for_pixel(9, 1_000_001, 4, 0);
        assert!(top.y > 1.0 - 1e-10);
    }

    #[test]
    fn direction_map_unit_norm() {
        let dm = direction_map(64, 32);
        for j in 0..32 {
            for i in 0..64 {
                let n = (dm[[j, i, 0]].powi(2) + dm[[j, i, 1]].powi(2) + dm[[j, i, 2]].powi(2))
                    .sqrt();
                assert!((n - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn direction_pixel_round_trip() {
        // direction → (u,v) → pixel must land back on the source texel.
        let (w, h) = (64usize, 32usize);
        for &(i, j) in &[(0usize, 0usize), (63, 31), (17, 9), (32, 16), (5, 30)] {
            let d = direction_for_pixel(w, h, i, j);
            let theta = d.y.clamp(-1.0, 1.0).acos();
            let phi = d.x.atan2(d.z);
            let u = (phi + PI) / (2.0 * PI);
            let v = theta / PI;
            let ri = (u * w as f64 - 0.5).round().rem_euclid(w as f64) as usize;
            let rj = (v * h as f64 - 0.5).round().clamp(0.0, (h - 1) as f64) as usize;
            assert_eq!((ri, rj), (i, j));
        }
    }

    #[test]
    fn rotate_full_turn_and_double_flip_are_identity() {
        let env = make_procedural_env(11, 16).unwrap();
        let turned = rotate_flip(&env, 2.0 * PI, false);
        assert_eq!(env.radiance, turned.radiance);
        let flipped2 = rotate_flip(&rotate_flip(&env, 0.0, true), 0.0, true);
        assert_eq!(env.radiance, flipped2.radiance);
    }

    #[test]
    fn rotate_preserves_energy_exactly() {
        let env = make_procedural_env(5, 16).unwrap();
        let rotated = rotate_flip(&env, PI / 3.0, false);
        // Texel permutation ⇒ identical value multisets, which is energy
        // preservation without float-summation order caveats.
        let mut a: Vec<u32> = env.radiance.iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = rotated.radiance.iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn texel_aligned_rotations_compose() {
        let env = make_procedural_env(9, 16).unwrap();
        let w = env.width() as f64;
        let (a, b) = (2.0 * PI * 5.0 / w, 2.0 * PI * 11.0 / w);
        let lhs = rotate_flip(&rotate_flip(&env, a, false), b, false);
        let rhs = rotate_flip(&env, a + b, false);
        assert_eq!(lhs.radiance, rhs.radiance);
    }

    #[test]
    fn sample_constant_map() {
        let env = EnvMap::new(Array3::from_elem((16, 32, 3), 2.5), "c").unwrap();
        let d = Vec3::new(0.3, -0.5, 0.4).normalize();
        let rgb = sample_radiance(&env, d).unwrap();
        for v in rgb {
            assert_abs_diff_eq!(v, 2.5, epsilon = 1e-6);
        }
    }

    #[test]
    fn sample_rejects_non_unit() {
        let env = EnvMap::new(Array3::from_elem((16, 32, 3), 1.0), "c").unwrap();
        assert!(matches!(
            sample_radiance(&env, Vec3::new(0.0, 0.0, 2.0)),
            Err(CoreError::Geometry(_))
        ));
    }

    #[test]
    fn sample_hits_bright_texel_at_its_center_direction() {
        // Map is dark except one bright texel adjacent to the map center;
        // sampling along that texel's own center direction (bilinear weight 1)
        // must return its value exactly. d is within a half-texel of (0,0,1).
        let (h, w) = (16usize, 32usize);
        let (bi, bj) = (w / 2, h / 2);
        let mut radiance = Array3::from_elem((h, w, 3), 0.125f32);
        for c in 0..3 {
            radiance[[bj, bi, c]] = 9.0;
        }
        let env = EnvMap::new(radiance, "bright").unwrap();
        let d = direction_for_pixel(w, h, bi, bj);
        let rgb = sample_radiance(&env, d).unwrap();
        for v in rgb {
            assert_abs_diff_eq!(v, 9.0, epsilon = 1e-5);
        }
        // Exactly (0,0,1) straddles the four center texels; brighten all
        // four and the blend is again exact.
        let mut radiance = Array3::from_elem((h, w, 3), 0.125f32);
        for (i, j) in [(w / 2 - 1, h / 2 - 1), (w / 2, h / 2 - 1), (w / 2 - 1, h / 2), (w / 2, h / 2)] {
            for c in 0..3 {
                radiance[[j, i, c]] = 9.0;
            }
        }
        let env = EnvMap::new(radiance, "bright4").unwrap();
        let rgb = sample_radiance(&env, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        for v in rgb {
            assert_abs_diff_eq!(v, 9.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn sample_commutes_with_texel_aligned_rotation() {
        use rand::SeedableRng;
        let env = make_procedural_env(21, 64).unwrap();
        let w = env.width() as f64;
        let yaw = 2.0 * PI * 17.0 / w; // texel-aligned
        let rotated = rotate_flip(&env, yaw, false);
        let inv = rot_y(-yaw);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let d = loop {
                let v = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if v.norm() > 1e-3 {
                    break v.normalize();
                }
            };
            let lhs = sample_radiance(&rotated, d).unwrap();
            let rhs = sample_radiance(&env, (inv * d).normalize()).unwrap();
            for c in 0..3 {
                assert_abs_diff_eq!(lhs[c], rhs[c], epsilon = 1e-3);
            }
        }
    }
}
