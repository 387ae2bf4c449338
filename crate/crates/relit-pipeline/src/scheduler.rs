//! Inference-time shuffled group scheduler.
//!
//! Relighting N views jointly would cost O(N²) attention; instead each
//! denoising iteration partitions the views into groups of at most `g`, runs
//! multi-view denoising independently per group (possibly on several
//! workers), then applies one sampler step per view behind a barrier and
//! reshuffles. Over enough iterations every view attends to every other.
//!
//! Scheduling law: each timestep draws one uniform permutation of the view
//! indices (seeded, deterministic) and chops it into consecutive chunks of
//! `g`, so a fixed pair shares a group with probability (g−1)/(N−1) per step
//! when g divides N. When it does not, exactly one short remainder group is
//! allowed; views are never padded or repeated.
//!
//! Noise streams are content-addressed: a view's initial latent and its
//! per-step ancestral noise derive from a hash of its conditioning pack, not
//! its position in the batch. Two views with identical conditioning therefore
//! follow identical trajectories when grouped together, and results do not
//! depend on the order views are listed in.

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use relit_core::camera::{plucker_map, Camera};
use relit_core::codec::Codec;
use relit_core::diffusion::{
    cfg_combine, inference_timesteps, sampler_step, NoiseSchedule, SamplerMode,
};
use relit_core::envmap::EnvMap;
use relit_core::{CoreError, Result};
use relit_nn::{
    build_conditioning, decode_views, denoise, lighting_tokens, stack_packs, ConditioningFlags,
    Denoiser, LightingTokens, ParamStore,
};

use crate::space::{image_to_model, model_to_image};

/// Per-timestep partitions of {0..n−1} into groups of at most `g`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShufflePlan {
    pub n: usize,
    pub g: usize,
    pub t_inf: usize,
    pub seed: u64,
    /// `partitions[t][group]` lists the member view indices.
    pub partitions: Vec<Vec<Vec<usize>>>,
}

impl ShufflePlan {
    /// Disjoint-cover check for every timestep: each index appears exactly
    /// once, no group exceeds `g`, and at most one group is short.
    pub fn validate(&self) -> Result<()> {
        for (t, partition) in self.partitions.iter().enumerate() {
            validate_partition(partition, self.n, self.g)
                .map_err(|e| CoreError::Schedule(format!("timestep {t}: {e}")))?;
        }
        Ok(())
    }
}

fn validate_partition(partition: &[Vec<usize>], n: usize, g: usize) -> Result<()> {
    let mut seen = vec![false; n];
    let mut short = 0usize;
    for group in partition {
        if group.is_empty() || group.len() > g {
            return Err(CoreError::Schedule(format!(
                "group size {} outside [1, {g}]",
                group.len()
            )));
        }
        if group.len() < g {
            short += 1;
        }
        for &i in group {
            if i >= n || seen[i] {
                return Err(CoreError::Schedule(format!("index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(CoreError::Schedule("partition does not cover all views".into()));
    }
    if short > 1 {
        return Err(CoreError::Schedule(format!("{short} short groups, want at most one")));
    }
    Ok(())
}

/// Seeded uniform permutation per timestep, chopped into consecutive chunks
/// of `g`. Deterministic per seed; the permutation differs across timesteps.
pub fn make_plan(n: usize, g: usize, t_inf: usize, seed: u64) -> Result<ShufflePlan> {
    if n == 0 || g == 0 {
        return Err(CoreError::Config(format!("plan needs n ≥ 1 and g ≥ 1, got n={n}, g={g}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut partitions = Vec::with_capacity(t_inf);
    for _ in 0..t_inf {
        let mut perm: Vec<usize> = (0..n).collect();
        // Fisher–Yates, explicit so the stream layout is pinned down.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        // Membership comes from the permutation; order inside a group is
        // canonicalized ascending so floating-point reduction order (and
        // hence bit-level results) cannot depend on where the chunk fell.
        partitions.push(
            perm.chunks(g)
                .map(|c| {
                    let mut group = c.to_vec();
                    group.sort_unstable();
                    group
                })
                .collect(),
        );
    }
    let plan = ShufflePlan { n, g, t_inf, seed, partitions };
    plan.validate()?;
    Ok(plan)
}

/// splitmix64-style mixer for deriving independent rng streams.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.rotate_left(32) ^ 0x9E37_79B9_7F4A_7C15;
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a over the view's conditioning bits, mixed with the run seed: the
/// content-addressed base seed for that view's noise streams.
fn view_noise_seed(run_seed: u64, cond_view: &ndarray::ArrayView3<'_, f32>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in cond_view.iter() {
        h ^= v.to_bits() as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(run_seed, h)
}

/// Everything a denoising run needs besides the plan and worker count.
pub struct DenoiseJob<'a> {
    pub model: &'a Denoiser,
    pub store: &'a ParamStore<f32>,
    pub schedule: &'a NoiseSchedule,
    /// (N, cond_channels, h, w) conditioning, one row per view.
    pub cond: &'a Array4<f32>,
    /// Target lighting, shared by all N views.
    pub lighting: &'a LightingTokens<f32>,
    pub guidance_scale: f32,
    pub sampler: SamplerMode,
    pub seed: u64,
}

fn gather_rows(a: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let (_, c, h, w) = a.dim();
    let mut out = Array4::zeros((idx.len(), c, h, w));
    for (r, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), r).assign(&a.index_axis(Axis(0), i));
    }
    out
}

/// Tag an error with the group that raised it, preserving the numeric class
/// so callers can still map NaN aborts to the numeric exit path.
fn tag_group(e: CoreError, group: usize, t: usize) -> CoreError {
    match e {
        CoreError::Numeric(m) => CoreError::Numeric(format!("group {group} at t={t}: {m}")),
        other => CoreError::Schedule(format!("group {group} at t={t}: {other}")),
    }
}

/// Run the full shuffled denoising loop and return the final latents
/// (N, 3, h, w) in model space.
///
/// Within a timestep each group's v-prediction (with classifier-free
/// guidance against null lighting) is computed independently — concurrently
/// when `workers > 1` — then a barrier collects them and one sampler step is
/// applied per view. The output is bit-identical for any worker count: group
/// results are reassembled by group index and each view's sampler noise
/// comes from its own stream.
pub fn distributed_denoise(
    job: &DenoiseJob<'_>,
    plan: &ShufflePlan,
    workers: usize,
) -> Result<Array4<f32>> {
    let (n, _, h, w) = job.cond.dim();
    if plan.n != n {
        return Err(CoreError::Schedule(format!(
            "plan covers {} views but {n} conditioning rows were given",
            plan.n
        )));
    }
    if workers == 0 {
        return Err(CoreError::Config("need at least one worker".into()));
    }
    plan.validate()?;
    let ts = inference_timesteps(job.schedule.t_max, plan.t_inf)?;
    let steps = ts.len() - 1;
    if plan.partitions.len() < steps {
        return Err(CoreError::Schedule(format!(
            "plan has {} timesteps, trajectory needs {steps}",
            plan.partitions.len()
        )));
    }

    let view_seeds: Vec<u64> = (0..n)
        .map(|i| view_noise_seed(job.seed, &job.cond.index_axis(Axis(0), i)))
        .collect();
    let c_lat = job.model.cfg.in_channels;
    let mut z = Array4::<f32>::zeros((n, c_lat, h, w));
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(view_seeds[i], 0));
        for v in z.index_axis_mut(Axis(0), i).iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CoreError::Config(format!("worker pool: {e}")))?;
    let null_lighting = job.lighting.to_null();
    let use_cfg = (job.guidance_scale - 1.0).abs() > 1e-12;

    for (wi, window) in ts.windows(2).take(steps).enumerate() {
        let (t, t_next) = (window[0], window[1]);
        let partition = &plan.partitions[wi];
        // Phase 1: per-group v-predictions, independent and order-stable.
        let group_vs: Vec<(usize, Array4<f32>)> = pool.install(|| {
            use rayon::prelude::*;
            partition
                .par_iter()
                .enumerate()
                .map(|(gi, group)| {
                    let zg = gather_rows(&z, group);
                    let cg = gather_rows(job.cond, group);
                    let run = || -> Result<Array4<f32>> {
                        let vc =
                            denoise(job.model, job.store, &zg, t as f64, &cg, job.lighting)?;
                        if !use_cfg {
                            return Ok(vc);
                        }
                        let vu =
                            denoise(job.model, job.store, &zg, t as f64, &cg, &null_lighting)?;
                        cfg_combine(&vc, &vu, job.guidance_scale)
                    };
                    run().map(|v| (gi, v)).map_err(|e| tag_group(e, gi, t))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut v_all = Array4::<f32>::zeros(z.raw_dim());
        for (gi, v) in group_vs {
            for (r, &i) in partition[gi].iter().enumerate() {
                v_all
                    .index_axis_mut(Axis(0), i)
                    .assign(&v.index_axis(Axis(0), r));
            }
        }
        // Phase 2 (barrier passed): one sampler step per view.
        for i in 0..n {
            let zi = z.index_axis(Axis(0), i).to_owned();
            let vi = v_all.index_axis(Axis(0), i).to_owned();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(view_seeds[i], 1 + wi as u64));
            let next = sampler_step(&zi, &vi, t, t_next, job.schedule, job.sampler, &mut rng)?;
            z.index_axis_mut(Axis(0), i).assign(&next);
        }
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("non-finite latent after denoising".into()));
    }
    Ok(z)
}

/// One view's inference-time inputs: the source-lit image, its material
/// maps, and the camera it was captured from.
#[derive(Debug, Clone)]
pub struct SourceView {
    /// Linear HDR radiance under the source illumination, (H, W, 3).
    pub x_src: Array3<f32>,
    pub i_d: Array3<f32>,
    pub i_orm: Array3<f32>,
    pub camera: Camera,
}

/// Append a novel view so it participates in the shuffle like any other:
/// it receives its own Plücker and material maps and a fresh-noise latent.
/// Returns `false` (after logging a warning) when the camera sits outside
/// the upper-hemisphere convention; that is advisory, not an error.
pub fn insert_novel_view(views: &mut Vec<SourceView>, novel: SourceView) -> bool {
    let inside = novel.camera.position().y > 0.0;
    if !inside {
        log::warn!(
            "novel camera at y = {:.3} is below the hemisphere convention; relighting anyway",
            novel.camera.position().y
        );
    }
    views.push(novel);
    inside
}

#[derive(Debug, Clone)]
pub struct RelightConfig {
    pub steps: usize,
    pub group_size: usize,
    pub guidance_scale: f32,
    pub workers: usize,
    pub seed: u64,
    pub sampler: SamplerMode,
    /// Lighting token grid height (width is twice this).
    pub lighting_grid: usize,
    pub flags: ConditioningFlags,
}

impl Default for RelightConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            group_size: 4,
            guidance_scale: 3.0,
            workers: 1,
            seed: 0,
            sampler: SamplerMode::Ddim,
            lighting_grid: 8,
            flags: ConditioningFlags::default(),
        }
    }
}

/// Build the conditioning rows for a set of source views: tonemapped source
/// image, materials, and a Plücker map computed at the view's resolution.
pub fn conditioning_for_views(
    views: &[SourceView],
    flags: ConditioningFlags,
) -> Result<Array4<f32>> {
    if views.is_empty() {
        return Err(CoreError::Config("relight needs at least one view".into()));
    }
    let codec = Codec::Pixel;
    let mut packs = Vec::with_capacity(views.len());
    for view in views {
        let (h, w, _) = view.x_src.dim();
        let cam = view.camera.with_resolution((w, h));
        let plucker = plucker_map(&cam, w, h)?;
        let src_m = image_to_model(&view.x_src);
        packs.push(build_conditioning(&src_m, &view.i_d, &view.i_orm, &plucker, &codec, flags)?);
    }
    stack_packs(&packs)
}

/// Relight `views` under `env`: shuffled group denoising from fresh noise,
/// decoded back to linear HDR radiance, one output image per input view.
pub fn relight(
    model: &Denoiser,
    store: &ParamStore<f32>,
    schedule: &NoiseSchedule,
    views: &[SourceView],
    env: &EnvMap,
    rc: &RelightConfig,
) -> Result<Vec<Array3<f32>>> {
    let cond = conditioning_for_views(views, rc.flags)?;
    let lighting: LightingTokens<f32> = lighting_tokens(env, rc.lighting_grid, false)?;
    let plan = make_plan(views.len(), rc.group_size, rc.steps, rc.seed)?;
    let job = DenoiseJob {
        model,
        store,
        schedule,
        cond: &cond,
        lighting: &lighting,
        guidance_scale: rc.guidance_scale,
        sampler: rc.sampler,
        seed: rc.seed,
    };
    let z = distributed_denoise(&job, &plan, rc.workers)?;
    Ok(decode_views(&Codec::Pixel, &z)
        .iter()
        .map(model_to_image)
        .collect())
}
