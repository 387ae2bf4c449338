//! Procedural PBR assets and the direct-illumination renderer.
//!
//! Geometry is analytic (signed distance fields hit with sphere tracing),
//! materials are procedural closed forms, and shading integrates the
//! Cook–Torrance GGX BRDF against every environment texel with solid-angle
//! weights. No shadows or interreflection: the renderer is a deterministic
//! physics oracle, not a path tracer.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{ray_for_pixel, Camera};
use crate::envmap::{direction_for_pixel, texel_solid_angle, EnvMap};
use crate::error::{CoreError, Result};
use crate::math::{clamp01, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    RoundedBox,
    Blob,
}

impl ShapeKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "box" => Ok(Self::RoundedBox),
            "blob" => Ok(Self::Blob),
            other => Err(CoreError::Config(format!(
                "unknown shape kind {other:?} (want sphere|box|blob)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::RoundedBox => "box",
            Self::Blob => "blob",
        }
    }
}

#[derive(Debug, Clone)]
enum Geometry {
    Sphere { radius: f64 },
    RoundedBox { half: Vec3, corner: f64 },
    Blob { spheres: Vec<(Vec3, f64)>, blend: f64 },
}

fn smin(a: f64, b: f64, k: f64) -> f64 {
    let h = clamp01(0.5 + 0.5 * (b - a) / k);
    b + (a - b) * h - k * h * (1.0 - h)
}

impl Geometry {
    fn sdf(&self, p: Vec3) -> f64 {
        match self {
            Geometry::Sphere { radius } => p.norm() - radius,
            Geometry::RoundedBox { half, corner } => {
                let q = Vec3::new(
                    p.x.abs() - half.x,
                    p.y.abs() - half.y,
                    p.z.abs() - half.z,
                );
                let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                let inside = q.x.max(q.y.max(q.z)).min(0.0);
                outside + inside - corner
            }
            Geometry::Blob { spheres, blend } => spheres
                .iter()
                .map(|(c, r)| (p - c).norm() - r)
                .fold(f64::INFINITY, |acc, d| {
                    if acc.is_infinite() {
                        d
                    } else {
                        smin(acc, d, *blend)
                    }
                }),
        }
    }

    fn bounding_radius(&self) -> f64 {
        match self {
            Geometry::Sphere { radius } => radius + 0.05,
            Geometry::RoundedBox { half, corner } => half.norm() + corner + 0.05,
            Geometry::Blob { spheres, blend } => {
                spheres
                    .iter()
                    .map(|(c, r)| c.norm() + r)
                    .fold(0.0, f64::max)
                    + blend
                    + 0.05
            }
        }
    }
}

/// Procedural surface material parameters; all outputs clamped to the
/// SceneAsset invariants (albedo in [0,1]^3, roughness ≥ 0.05, metallic in
/// [0,1]).
#[derive(Debug, Clone)]
struct TexParams {
    color_a: [f64; 3],
    color_b: [f64; 3],
    mix_freq: Vec3,
    mix_freq2: Vec3,
    mix_phase: f64,
    mix_phase2: f64,
    rough_base: f64,
    rough_amp: f64,
    rough_freq: Vec3,
    rough_phase: f64,
    metal_base: f64,
    metal_amp: f64,
    metal_freq: Vec3,
    metal_phase: f64,
}

impl TexParams {
    fn constant(albedo: [f64; 3], roughness: f64, metallic: f64) -> Self {
        Self {
            color_a: albedo,
            color_b: albedo,
            mix_freq: Vec3::zeros(),
            mix_freq2: Vec3::zeros(),
            mix_phase: 0.0,
            mix_phase2: 0.0,
            rough_base: (roughness - 0.05) / 0.95,
            rough_amp: 0.0,
            rough_freq: Vec3::zeros(),
            rough_phase: 0.0,
            metal_base: metallic,
            metal_amp: 0.0,
            metal_freq: Vec3::zeros(),
            metal_phase: 0.0,
        }
    }

    fn eval(&self, p: Vec3) -> ([f64; 3], f64, f64) {
        let t = 0.5 + 0.5 * (self.mix_freq.dot(&p) + self.mix_phase).sin()
            * (self.mix_freq2.dot(&p) + self.mix_phase2).sin();
        let albedo = std::array::from_fn(|c| {
            clamp01(self.color_a[c] + (self.color_b[c] - self.color_a[c]) * t)
        });
        let rough = 0.05
            + 0.95
                * clamp01(
                    self.rough_base
                        + self.rough_amp * (self.rough_freq.dot(&p) + self.rough_phase).sin(),
                );
        let metal = clamp01(
            self.metal_base + self.metal_amp * (self.metal_freq.dot(&p) + self.metal_phase).sin(),
        );
        (albedo, rough, metal)
    }
}

#[derive(Debug, Clone)]
pub struct SceneAsset {
    pub object_id: String,
    geometry: Geometry,
    tex: TexParams,
}

impl SceneAsset {
    pub fn sdf(&self, p: Vec3) -> f64 {
        self.geometry.sdf(p)
    }

    /// Outward unit normal from the SDF gradient (central differences).
    pub fn normal(&self, p: Vec3) -> Vec3 {
        let e = 1e-5;
        let g = Vec3::new(
            self.sdf(p + Vec3::new(e, 0.0, 0.0)) - self.sdf(p - Vec3::new(e, 0.0, 0.0)),
            self.sdf(p + Vec3::new(0.0, e, 0.0)) - self.sdf(p - Vec3::new(0.0, e, 0.0)),
            self.sdf(p + Vec3::new(0.0, 0.0, e)) - self.sdf(p - Vec3::new(0.0, 0.0, e)),
        );
        g.normalize()
    }

    /// (albedo, roughness, metallic) at a surface point.
    pub fn texture(&self, p: Vec3) -> ([f64; 3], f64, f64) {
        self.tex.eval(p)
    }

    pub fn bounding_radius(&self) -> f64 {
        self.geometry.bounding_radius()
    }

    /// Constant-material sphere, used by oracle tests and ablations.
    pub fn uniform_sphere(radius: f64, albedo: [f64; 3], roughness: f64, metallic: f64) -> Self {
        Self {
            object_id: "uniform-sphere".into(),
            geometry: Geometry::Sphere { radius },
            tex: TexParams::constant(albedo, roughness, metallic),
        }
    }
}

pub fn make_procedural_asset(seed: u64, kind: ShapeKind) -> SceneAsset {
    // Separate the kinds in seed space so (seed, kind) pairs never collide.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(4).wrapping_add(match kind {
        ShapeKind::Sphere => 0,
        ShapeKind::RoundedBox => 1,
        ShapeKind::Blob => 2,
    }));
    let geometry = match kind {
        ShapeKind::Sphere => Geometry::Sphere { radius: rng.random_range(0.6..0.9) },
        ShapeKind::RoundedBox => Geometry::RoundedBox {
            half: Vec3::new(
                rng.random_range(0.35..0.7),
                rng.random_range(0.35..0.7),
                rng.random_range(0.35..0.7),
            ),
            corner: rng.random_range(0.05..0.2),
        },
        ShapeKind::Blob => {
            let n = rng.random_range(3..=5usize);
            let spheres = (0..n)
                .map(|_| {
                    let c = Vec3::new(
                        rng.random_range(-0.4..0.4),
                        rng.random_range(-0.4..0.4),
                        rng.random_range(-0.4..0.4),
                    );
                    (c, rng.random_range(0.25..0.45))
                })
                .collect();
            Geometry::Blob { spheres, blend: 0.15 }
        }
    };
    let mut rand_dir = |lo: f64, hi: f64| {
        let f: f64 = rng.random_range(lo..hi);
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n < 1e-6 { Vec3::new(f, 0.0, 0.0) } else { v * (f / n) }
    };
    let mix_freq = rand_dir(1.5, 6.0);
    let mix_freq2 = rand_dir(1.5, 6.0);
    let rough_freq = rand_dir(1.0, 5.0);
    let metal_freq = rand_dir(1.0, 5.0);
    let tex = TexParams {
        color_a: std::array::from_fn(|_| rng.random_range(0.1..0.9)),
        color_b: std::array::from_fn(|_| rng.random_range(0.1..0.9)),
        mix_freq,
        mix_freq2,
        mix_phase: rng.random_range(0.0..std::f64::consts::TAU),
        mix_phase2: rng.random_range(0.0..std::f64::consts::TAU),
        rough_base: rng.random_range(0.15..0.75),
        rough_amp: rng.random_range(0.05..0.25),
        rough_freq,
        rough_phase: rng.random_range(0.0..std::f64::consts::TAU),
        metal_base: rng.random_range(0.0..0.8),
        metal_amp: rng.random_range(0.0..0.4),
        metal_freq,
        metal_phase: rng.random_range(0.0..std::f64::consts::TAU),
    };
    SceneAsset { object_id: format!("{}-{seed}", kind.name()), geometry, tex }
}

/// Cook–Torrance GGX with the metallic workflow: diffuse (1−m)·albedo/π,
/// specular D·G·F/(4·cosθ_i·cosθ_o) with F0 = mix(0.04, albedo, m), Smith
/// separable masking, Schlick Fresnel. Returns 0 outside the upper
/// hemisphere of n.
pub fn shade_brdf(
    albedo: [f64; 3],
    roughness: f64,
    metallic: f64,
    n: Vec3,
    w_i: Vec3,
    w_o: Vec3,
) -> [f64; 3] {
    let cos_i = n.dot(&w_i);
    let cos_o = n.dot(&w_o);
    if cos_i <= 0.0 || cos_o <= 0.0 {
        return [0.0; 3];
    }
    let diffuse: [f64; 3] = std::array::from_fn(|c| {
        (1.0 - metallic) * albedo[c] / std::f64::consts::PI
    });
    let half_raw = w_i + w_o;
    if half_raw.norm() < 1e-9 {
        return diffuse;
    }
    let h = half_raw.normalize();
    let cos_h = n.dot(&h).max(0.0);
    let hdot = h.dot(&w_i).max(0.0); // == h·w_o by construction
    let alpha = roughness * roughness;
    let a2 = alpha * alpha;
    let denom = cos_h * cos_h * (a2 - 1.0) + 1.0;
    let d = a2 / (std::f64::consts::PI * denom * denom);
    let g1 = |c: f64| 2.0 * c / (c + (a2 + (1.0 - a2) * c * c).sqrt());
    let g = g1(cos_i) * g1(cos_o);
    let fres = (1.0 - hdot).powi(5);
    std::array::from_fn(|c| {
        let f0 = 0.04 + (albedo[c] - 0.04) * metallic;
        let f = f0 + (1.0 - f0) * fres;
        diffuse[c] + d * g * f / (4.0 * cos_i * cos_o)
    })
}

/// One surviving camera ray: surface point, shading normal, and material.
#[derive(Debug, Clone)]
pub struct HitSample {
    pub point: Vec3,
    pub normal: Vec3,
    pub w_o: Vec3,
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

/// Geometry pass result: per pixel, the list of sub-sample hits out of
/// `total_per_pixel` rays. Shading (per env) reuses this across envs.
#[derive(Debug, Clone)]
pub struct TraceResult {
    pub width: usize,
    pub height: usize,
    pub total_per_pixel: usize,
    pub hits: Vec<Vec<HitSample>>,
}

fn ray_sphere_enter(origin: Vec3, dir: Vec3, radius: f64) -> Option<(f64, f64)> {
    // |o + t d|^2 = r^2 with unit d.
    let b = origin.dot(&dir);
    let c = origin.dot(&origin) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    let (t0, t1) = (-b - s, -b + s);
    if t1 < 0.0 {
        None
    } else {
        Some((t0.max(0.0), t1))
    }
}

/// Sphere-trace the asset; `None` on miss.
pub fn intersect(asset: &SceneAsset, origin: Vec3, dir: Vec3) -> Option<Vec3> {
    let (t_enter, t_exit) = ray_sphere_enter(origin, dir, asset.bounding_radius())?;
    let mut t = t_enter;
    for _ in 0..256 {
        let p = origin + dir * t;
        let d = asset.sdf(p);
        if d < 1e-6 {
            return Some(p);
        }
        // Blob smin under-estimates distance, so stepping by it is safe.
        t += d.max(1e-7) * 0.9;
        if t > t_exit + 0.1 {
            return None;
        }
    }
    None
}

/// Geometry pass: sphere-trace `spp` stratified sub-rays per pixel (rounded
/// up to a full s×s grid).
pub fn trace_view(asset: &SceneAsset, camera: &Camera, spp: usize) -> Result<TraceResult> {
    if spp == 0 {
        return Err(CoreError::Config("spp must be ≥ 1".into()));
    }
    let to_center = -camera.position();
    if camera.forward().dot(&to_center) <= 0.0 {
        return Err(CoreError::Geometry("camera looks away from the asset".into()));
    }
    let (w, h) = camera.resolution;
    let s = (spp as f64).sqrt().ceil() as usize;
    let total = s * s;
    let mut hits = vec![Vec::new(); w * h];
    for j in 0..h {
        for i in 0..w {
            let samples = &mut hits[j * w + i];
            for sj in 0..s {
                for si in 0..s {
                    // Sub-pixel offsets recentered so the s×s grid tiles the
                    // pixel; s=1 reduces to the exact pixel-center ray.
                    let (o, d) = if s == 1 {
                        ray_for_pixel(camera, i, j)?
                    } else {
                        sub_pixel_ray(camera, i, j, si, sj, s)?
                    };
                    if let Some(p) = intersect(asset, o, d) {
                        let n = asset.normal(p);
                        let (albedo, roughness, metallic) = asset.texture(p);
                        samples.push(HitSample {
                            point: p,
                            normal: n,
                            w_o: -d,
                            albedo,
                            roughness,
                            metallic,
                        });
                    }
                }
            }
        }
    }
    Ok(TraceResult { width: w, height: h, total_per_pixel: total, hits })
}

fn sub_pixel_ray(
    camera: &Camera,
    i: usize,
    j: usize,
    si: usize,
    sj: usize,
    s: usize,
) -> Result<(Vec3, Vec3)> {
    let (w, h) = camera.resolution;
    if i >= w || j >= h {
        return Err(CoreError::Bounds(format!("pixel ({i},{j}) outside {w}x{h}")));
    }
    let tan_half = (camera.fov_y.to_radians() * 0.5).tan();
    let aspect = w as f64 / h as f64;
    let fx = i as f64 + (si as f64 + 0.5) / s as f64;
    let fy = j as f64 + (sj as f64 + 0.5) / s as f64;
    let x_ndc = (fx / w as f64) * 2.0 - 1.0;
    let y_ndc = 1.0 - (fy / h as f64) * 2.0;
    let dir_cam = Vec3::new(x_ndc * aspect * tan_half, y_ndc * tan_half, -1.0).normalize();
    Ok((camera.position(), camera.rotation() * dir_cam))
}

/// Albedo image in [0,1], ORM with occlusion forced to 0, binary mask.
#[derive(Debug, Clone)]
pub struct MaterialMaps {
    pub i_d: Array3<f32>,
    pub i_orm: Array3<f32>,
    pub mask: Array2<f32>,
}

pub fn material_maps(trace: &TraceResult) -> MaterialMaps {
    let (w, h) = (trace.width, trace.height);
    let mut i_d = Array3::<f32>::zeros((h, w, 3));
    let mut i_orm = Array3::<f32>::zeros((h, w, 3));
    let mut mask = Array2::<f32>::zeros((h, w));
    let inv = 1.0 / trace.total_per_pixel as f64;
    for j in 0..h {
        for i in 0..w {
            let samples = &trace.hits[j * w + i];
            let covered = samples.len() * 2 >= trace.total_per_pixel && !samples.is_empty();
            if !covered {
                continue;
            }
            mask[[j, i]] = 1.0;
            let mut d = [0.0f64; 3];
            let (mut rough, mut metal) = (0.0f64, 0.0f64);
            for hs in samples {
                for c in 0..3 {
                    d[c] += hs.albedo[c] * inv;
                }
                rough += hs.roughness * inv;
                metal += hs.metallic * inv;
            }
            for c in 0..3 {
                i_d[[j, i, c]] = d[c] as f32;
            }
            // Occlusion (channel 0) is unused and stays zero.
            i_orm[[j, i, 1]] = rough as f32;
            i_orm[[j, i, 2]] = metal as f32;
        }
    }
    MaterialMaps { i_d, i_orm, mask }
}

/// Direct illumination: L_o = Σ_texels f(w_i,w_o)·L_env(w_i)·max(n·w_i,0)·Δω.
pub fn shade(trace: &TraceResult, env: &EnvMap) -> Array3<f32> {
    let (w, h) = (trace.width, trace.height);
    let (eh, ew, _) = env.radiance.dim();
    // Pre-weighted env texels: direction and radiance·Δω.
    let mut dirs = Vec::with_capacity(eh * ew);
    let mut rad_w = Vec::with_capacity(eh * ew);
    for j in 0..eh {
        let dw = texel_solid_angle(ew, eh, j);
        for i in 0..ew {
            dirs.push(direction_for_pixel(ew, eh, i, j));
            rad_w.push([
                env.radiance[[j, i, 0]] as f64 * dw,
                env.radiance[[j, i, 1]] as f64 * dw,
                env.radiance[[j, i, 2]] as f64 * dw,
            ]);
        }
    }
    let inv = 1.0 / trace.total_per_pixel as f64;
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for j in 0..h {
        for i in 0..w {
            let samples = &trace.hits[j * w + i];
            let covered = samples.len() * 2 >= trace.total_per_pixel && !samples.is_empty();
            if !covered {
                continue;
            }
            let mut acc = [0.0f64; 3];
            for hs in samples {
                for (d, lw) in dirs.iter().zip(rad_w.iter()) {
                    let cos_i = hs.normal.dot(d);
                    if cos_i <= 0.0 {
                        continue;
                    }
                    let f = shade_brdf(hs.albedo, hs.roughness, hs.metallic, hs.normal, *d, hs.w_o);
                    for c in 0..3 {
                        acc[c] += f[c] * lw[c] * cos_i;
                    }
                }
            }
            for c in 0..3 {
                out[[j, i, c]] = (acc[c] * inv) as f32;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub radiance: Array3<f32>,
    pub materials: MaterialMaps,
    pub mask: Array2<f32>,
}

pub fn render_view(
    asset: &SceneAsset,
    camera: &Camera,
    env: &EnvMap,
    spp: usize,
) -> Result<RenderOutput> {
    let trace = trace_view(asset, camera, spp)?;
    let materials = material_maps(&trace);
    let radiance = shade(&trace, env);
    let mask = materials.mask.clone();
    Ok(RenderOutput { radiance, materials, mask })
}
