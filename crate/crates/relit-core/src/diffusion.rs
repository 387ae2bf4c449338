//! Diffusion primitives: cosine noise schedule, forward noising,
//! v-parameterization algebra, DDIM/DDPM sampler steps, and classifier-free
//! guidance.
//!
//! Conventions: `z_t = α_t·x0 + σ_t·ε`, `v = α_t·ε − σ_t·x0`, with
//! `α_t² + σ_t² = 1`. Timesteps run t = 0 (clean) … T (pure noise).

use ndarray::{Array, Array4, Dimension};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    /// Training step count T; tables hold T+1 entries for t ∈ [0, T].
    pub t_max: usize,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: ᾱ(t) = cos²(((t/T + 0.008)/1.008)·π/2), normalized
    /// so ᾱ(0) = 1.
    pub fn cosine(t_max: usize) -> Result<Self> {
        if t_max < 2 {
            return Err(CoreError::Config(format!("schedule needs T ≥ 2, got {t_max}")));
        }
        let f = |t: f64| {
            let x = ((t / t_max as f64 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut alpha = Vec::with_capacity(t_max + 1);
        let mut sigma = Vec::with_capacity(t_max + 1);
        for t in 0..=t_max {
            let abar = (f(t as f64) / f0).clamp(0.0, 1.0);
            alpha.push(abar.sqrt());
            sigma.push((1.0 - abar).sqrt());
        }
        Ok(Self { t_max, alpha, sigma })
    }

    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        self.alpha
            .get(t)
            .copied()
            .ok_or_else(|| CoreError::Schedule(format!("t={t} outside [0,{}]", self.t_max)))
    }

    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        self.sigma
            .get(t)
            .copied()
            .ok_or_else(|| CoreError::Schedule(format!("t={t} outside [0,{}]", self.t_max)))
    }
}

fn check_shapes<D: Dimension>(a: &Array<f32, D>, b: &Array<f32, D>) -> Result<()> {
    if a.raw_dim() != b.raw_dim() {
        return Err(CoreError::Shape(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// z_t = α_t·x0 + σ_t·ε.
pub fn add_noise<D: Dimension>(
    x0: &Array<f32, D>,
    eps: &Array<f32, D>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array<f32, D>> {
    check_shapes(x0, eps)?;
    let a = schedule.alpha_at(t)? as f32;
    let s = schedule.sigma_at(t)? as f32;
    Ok(ndarray::Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + s * e))
}

/// v = α_t·ε − σ_t·x0.
pub fn v_target<D: Dimension>(
    x0: &Array<f32, D>,
    eps: &Array<f32, D>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array<f32, D>> {
    check_shapes(x0, eps)?;
    let a = schedule.alpha_at(t)? as f32;
    let s = schedule.sigma_at(t)? as f32;
    Ok(ndarray::Zip::from(x0).and(eps).map_collect(|&x, &e| a * e - s * x))
}

/// x0 = α_t·z_t − σ_t·v.
pub fn x0_from_v<D: Dimension>(
    z_t: &Array<f32, D>,
    v: &Array<f32, D>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array<f32, D>> {
    check_shapes(z_t, v)?;
    let a = schedule.alpha_at(t)? as f32;
    let s = schedule.sigma_at(t)? as f32;
    Ok(ndarray::Zip::from(z_t).and(v).map_collect(|&z, &vv| a * z - s * vv))
}

/// ε = σ_t·z_t + α_t·v.
pub fn eps_from_v<D: Dimension>(
    z_t: &Array<f32, D>,
    v: &Array<f32, D>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array<f32, D>> {
    check_shapes(z_t, v)?;
    let a = schedule.alpha_at(t)? as f32;
    let s = schedule.sigma_at(t)? as f32;
    Ok(ndarray::Zip::from(z_t).and(v).map_collect(|&z, &vv| s * z + a * vv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Ddim,
    Ddpm,
}

/// One reverse step t → t_next. DDIM is deterministic; DDPM (η = 1
/// ancestral) draws schedule-consistent Gaussian noise from `rng`.
pub fn sampler_step<D: Dimension, R: Rng>(
    z_t: &Array<f32, D>,
    v_pred: &Array<f32, D>,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Array<f32, D>> {
    if t_next >= t {
        return Err(CoreError::Schedule(format!("sampler needs t_next < t, got {t_next} ≥ {t}")));
    }
    check_shapes(z_t, v_pred)?;
    let x0 = x0_from_v(z_t, v_pred, t, schedule)?;
    let eps = eps_from_v(z_t, v_pred, t, schedule)?;
    let a_n = schedule.alpha_at(t_next)? as f32;
    let s_n = schedule.sigma_at(t_next)? as f32;
    match mode {
        SamplerMode::Ddim => {
            Ok(ndarray::Zip::from(&x0).and(&eps).map_collect(|&x, &e| a_n * x + s_n * e))
        }
        SamplerMode::Ddpm => {
            // η = 1: σ_step = (σ_n/σ_t)·√(1 − ᾱ_t/ᾱ_n); the deterministic ε̂
            // share shrinks to keep total variance on-schedule.
            let a_t = schedule.alpha_at(t)?;
            let s_t = schedule.sigma_at(t)?;
            let (a_nf, s_nf) = (a_n as f64, s_n as f64);
            let ratio = (1.0 - (a_t * a_t) / (a_nf * a_nf).max(1e-300)).max(0.0);
            let sigma_step = if s_t > 0.0 { (s_nf / s_t) * ratio.sqrt() } else { 0.0 };
            let sigma_step = sigma_step.min(s_nf);
            let det = (s_nf * s_nf - sigma_step * sigma_step).max(0.0).sqrt() as f32;
            let sigma_step = sigma_step as f32;
            let mut out = ndarray::Zip::from(&x0)
                .and(&eps)
                .map_collect(|&x, &e| a_n * x + det * e);
            for v in out.iter_mut() {
                let xi: f32 = rng.sample(StandardNormal);
                *v += sigma_step * xi;
            }
            Ok(out)
        }
    }
}

/// v_guided = v_uncond + scale·(v_cond − v_uncond).
pub fn cfg_combine<D: Dimension>(
    v_cond: &Array<f32, D>,
    v_uncond: &Array<f32, D>,
    scale: f32,
) -> Result<Array<f32, D>> {
    check_shapes(v_cond, v_uncond)?;
    Ok(ndarray::Zip::from(v_cond)
        .and(v_uncond)
        .map_collect(|&c, &u| u + scale * (c - u)))
}

/// Descending inference timesteps T = t_0 > t_1 > … > t_steps = 0.
pub fn inference_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(CoreError::Config(format!(
            "need 1 ≤ steps ≤ T, got steps={steps}, T={t_max}"
        )));
    }
    let mut ts: Vec<usize> = (0..=steps)
        .map(|i| ((t_max as f64) * (1.0 - i as f64 / steps as f64)).round() as usize)
        .collect();
    ts.dedup();
    Ok(ts)
}

/// Latents plus the shared timestep; all views advance in lockstep.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub z: Array4<f32>,
    pub t: usize,
    pub rng_seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: (usize, usize), seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
    }

    #[test]
    fn schedule_endpoints_and_identity() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_abs_diff_eq!(s.alpha[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.sigma[0], 0.0, epsilon = 1e-6);
        for t in 0..=1000 {
            assert_abs_diff_eq!(s.alpha[t].powi(2) + s.sigma[t].powi(2), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn schedule_strictly_decreasing() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        for t in 1..=1000 {
            assert!(s.alpha[t] < s.alpha[t - 1], "alpha not strictly decreasing at t={t}");
        }
    }

    #[test]
    fn schedule_rejects_tiny_t() {
        assert!(matches!(NoiseSchedule::cosine(1), Err(CoreError::Config(_))));
    }

    #[test]
    fn add_noise_endpoints() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x0 = randn((4, 6), 1);
        let eps = randn((4, 6), 2);
        let z0 = add_noise(&x0, &eps, 0, &s).unwrap();
        assert_eq!(z0, x0);
        let zt = add_noise(&x0, &Array2::zeros((4, 6)), 37, &s).unwrap();
        let a = s.alpha[37] as f32;
        for (z, x) in zt.iter().zip(x0.iter()) {
            assert_abs_diff_eq!(*z, a * x, epsilon = 1e-7);
        }
        // t = T: z_T − ε bounded by α_T·‖x0‖∞ + (1−σ_T)·‖ε‖∞.
        let zt = add_noise(&x0, &eps, 100, &s).unwrap();
        let bound = s.alpha[100] * x0.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64))
            + (1.0 - s.sigma[100]) * eps.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
        for (z, e) in zt.iter().zip(eps.iter()) {
            assert!(((z - e).abs() as f64) <= bound + 1e-6);
        }
    }

    #[test]
    fn add_noise_rejects_shape_mismatch() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let a = Array2::<f32>::zeros((2, 3));
        let b = Array2::<f32>::zeros((3, 2));
        assert!(matches!(add_noise(&a, &b, 1, &s), Err(CoreError::Shape(_))));
    }

    #[test]
    fn v_at_t0_is_eps() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let x0 = randn((3, 5), 3);
        let eps = randn((3, 5), 4);
        let v = v_target(&x0, &eps, 0, &s).unwrap();
        assert_eq!(v, eps);
    }

    #[test]
    fn v_at_equal_coefficients() {
        // Hand-built schedule with α = σ = 1/√2 at t=1.
        let r = 0.5f64.sqrt();
        let s = NoiseSchedule { t_max: 1, alpha: vec![1.0, r], sigma: vec![0.0, r] };
        let x0 = randn((2, 4), 5);
        let eps = randn((2, 4), 6);
        let v = v_target(&x0, &eps, 1, &s).unwrap();
        for ((vv, x), e) in v.iter().zip(x0.iter()).zip(eps.iter()) {
            assert_abs_diff_eq!(*vv, ((e - x) as f64 * r) as f32, epsilon = 1e-6);
        }
    }

    #[test]
    fn v_round_trips() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        for (seed, t) in [(7u64, 1usize), (8, 250), (9, 999), (10, 500)] {
            let x0 = randn((4, 4), seed);
            let eps = randn((4, 4), seed + 100);
            let z = add_noise(&x0, &eps, t, &s).unwrap();
            let v = v_target(&x0, &eps, t, &s).unwrap();
            let x0_rec = x0_from_v(&z, &v, t, &s).unwrap();
            let eps_rec = eps_from_v(&z, &v, t, &s).unwrap();
            for (a, b) in x0_rec.iter().zip(x0.iter()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
            }
            for (a, b) in eps_rec.iter().zip(eps.iter()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn ddim_step_with_oracle_v_matches_add_noise() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = randn((4, 4), 11);
        let eps = randn((4, 4), 12);
        let (t, t_next) = (800, 500);
        let z = add_noise(&x0, &eps, t, &s).unwrap();
        let v = v_target(&x0, &eps, t, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z_next = sampler_step(&z, &v, t, t_next, &s, SamplerMode::Ddim, &mut rng).unwrap();
        let want = add_noise(&x0, &eps, t_next, &s).unwrap();
        for (a, b) in z_next.iter().zip(want.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
        }
        // Endpoint: stepping straight to 0 with oracle v recovers x0.
        let z0 = sampler_step(&z, &v, t, 0, &s, SamplerMode::Ddim, &mut rng).unwrap();
        for (a, b) in z0.iter().zip(x0.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-5);
        }
    }

    #[test]
    fn ddpm_step_deterministic_per_seed() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let z = randn((4, 4), 13);
        let v = randn((4, 4), 14);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            sampler_step(&z, &v, 700, 350, &s, SamplerMode::Ddpm, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sampler_rejects_non_decreasing_t() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let z = randn((2, 2), 15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sampler_step(&z, &z, 10, 10, &s, SamplerMode::Ddim, &mut rng),
            Err(CoreError::Schedule(_))
        ));
        assert!(matches!(
            sampler_step(&z, &z, 10, 40, &s, SamplerMode::Ddim, &mut rng),
            Err(CoreError::Schedule(_))
        ));
    }

    #[test]
    fn cfg_combine_endpoints_and_scale3() {
        let c = Array2::from_elem((2, 2), 2.0f32);
        let u = Array2::from_elem((2, 2), 0.5f32);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        let g = cfg_combine(&c, &u, 3.0).unwrap();
        for v in g.iter() {
            assert_eq!(*v, 3.0 * 2.0 - 2.0 * 0.5); // 3c − 2u
        }
    }

    #[test]
    fn oracle_v_full_ddim_trajectory_recovers_x0() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = randn((3, 8), 21);
        let eps = randn((3, 8), 22);
        let ts = inference_timesteps(1000, 50).unwrap();
        assert_eq!(*ts.first().unwrap(), 1000);
        assert_eq!(*ts.last().unwrap(), 0);
        let mut z = add_noise(&x0, &eps, 1000, &s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for w in ts.windows(2) {
            let (t, t_next) = (w[0], w[1]);
            let v = v_target(&x0, &eps, t, &s).unwrap();
            z = sampler_step(&z, &v, t, t_next, &s, SamplerMode::Ddim, &mut rng).unwrap();
        }
        for (a, b) in z.iter().zip(x0.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-4);
        }
    }
}
