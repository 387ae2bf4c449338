//! Staged training: single-view → multi-view → upscaled multi-view.
//!
//! Each stage owns a flat [`TrainConfig`]; later stages initialize from the
//! previous stage's checkpoint. Newly added multi-view attention carries a
//! zero-initialized output projection, so the first multi-view forward
//! reproduces the single-view function exactly and training merely continues.
//! The upscale stage reuses the architecture unchanged (convolutions and
//! attention carry no positional state) on higher-resolution crops.
//!
//! Rng streams are per-purpose — tuple sampling, noising, lighting dropout —
//! so a change in one consumer cannot shift the draws of another.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use relit_core::camera::{plucker_map, Camera, PluckerMap};
use relit_core::codec::Codec;
use relit_core::dataset::{mask_from_orm, Dataset};
use relit_core::diffusion::{add_noise, v_target, NoiseSchedule};
use relit_core::envmap::EnvMap;
use relit_core::metrics::{VARIANT_FULL, VARIANT_NO_MATERIALS, VARIANT_SINGLE_VIEW};
use relit_core::resample::resize_area;
use relit_core::scene::MaterialMaps;
use relit_core::{CoreError, Result};
use relit_nn::ops::mse_loss;
use relit_nn::{
    build_conditioning, encode_views, lighting_tokens, save_checkpoint, stack_packs,
    ConditioningFlags, Denoiser, ForwardInput, LightingTokens, ParamStore, UNetConfig,
};

use crate::optimizer::AdamW;
use crate::scheduler::mix;
use crate::space::image_to_model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Single,
    Multi,
    Upscale,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Single => "single",
            Stage::Multi => "multi",
            Stage::Upscale => "upscale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Stage::Single),
            "multi" => Ok(Stage::Multi),
            "upscale" => Ok(Stage::Upscale),
            other => Err(CoreError::Config(format!(
                "unknown stage {other:?} (want single|multi|upscale)"
            ))),
        }
    }

    pub fn index(self) -> usize {
        match self {
            Stage::Single => 0,
            Stage::Multi => 1,
            Stage::Upscale => 2,
        }
    }

    /// The stage whose checkpoint this stage trains from.
    pub fn predecessor(self) -> Option<Stage> {
        match self {
            Stage::Single => None,
            Stage::Multi => Some(Stage::Single),
            Stage::Upscale => Some(Stage::Multi),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoMaterials,
    SingleView,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => VARIANT_FULL,
            Variant::NoMaterials => VARIANT_NO_MATERIALS,
            Variant::SingleView => VARIANT_SINGLE_VIEW,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no_materials" | "nomat" => Ok(Variant::NoMaterials),
            "single_view" | "singleview" => Ok(Variant::SingleView),
            other => Err(CoreError::Config(format!(
                "unknown variant {other:?} (want full|no_materials|single_view)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Flat per-stage training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Views per group during multi-view stages.
    pub k: usize,
    /// Tuples per optimizer step.
    pub batch_size: usize,
    /// Peak learning rate; each stage warms up linearly to it and then
    /// decays to zero on a cosine (see [`lr_at`]).
    pub learning_rate: f64,
    pub iterations: usize,
    pub lighting_dropout_p: f64,
    /// Inference-time guidance strength; carried in the config so a run is
    /// reproducible from its emitted file alone.
    pub guidance_scale: f64,
    pub resolution: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Lighting token grid height (width is twice this).
    pub lighting_grid: usize,
    /// Training step count T of the noise schedule.
    pub t_max: usize,
}

impl TrainConfig {
    /// Stage defaults: the learning-rate ladder steps down ×2 then ×2.5
    /// (5e-5 → 2.5e-5 → 1e-5), iteration counts are desk-scale, and the
    /// upscale stage doubles the training resolution.
    pub fn for_stage(stage: Stage) -> Self {
        let (learning_rate, iterations, resolution) = match stage {
            Stage::Single => (5e-5, 2000, 32),
            Stage::Multi => (2.5e-5, 2000, 32),
            Stage::Upscale => (1e-5, 1000, 64),
        };
        Self {
            stage,
            k: 4,
            batch_size: 1,
            learning_rate,
            iterations,
            lighting_dropout_p: 0.10,
            guidance_scale: 3.0,
            resolution,
            seed: 0,
            variant: Variant::Full,
            lighting_grid: 8,
            t_max: 1000,
        }
    }

    /// Views actually drawn per tuple: the single-view stage and the
    /// single_view ablation variant both force 1.
    pub fn effective_k(&self) -> usize {
        if self.stage == Stage::Single || self.variant == Variant::SingleView {
            1
        } else {
            self.k
        }
    }

    pub fn flags(&self) -> ConditioningFlags {
        ConditioningFlags {
            materials_present: self.variant != Variant::NoMaterials,
            plucker_present: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lighting_dropout_p) {
            return Err(CoreError::Config(format!(
                "lighting_dropout_p = {} outside [0, 1]",
                self.lighting_dropout_p
            )));
        }
        if self.k == 0 || self.batch_size == 0 || self.iterations == 0 {
            return Err(CoreError::Config(
                "k, batch_size, and iterations must all be ≥ 1".into(),
            ));
        }
        if self.resolution == 0 || self.lighting_grid == 0 {
            return Err(CoreError::Config("resolution and lighting_grid must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::Config(format!(
                "learning_rate = {} must be positive and finite",
                self.learning_rate
            )));
        }
        if self.t_max < 2 {
            return Err(CoreError::Config(format!("t_max = {} below 2", self.t_max)));
        }
        Ok(())
    }

    /// Flat `key=value` serialization, sorted by key; the on-disk stage
    /// config format.
    pub fn to_kv(&self) -> String {
        let mut lines = vec![
            format!("batch_size={}", self.batch_size),
            format!("guidance_scale={}", self.guidance_scale),
            format!("iterations={}", self.iterations),
            format!("k={}", self.k),
            format!("learning_rate={}", self.learning_rate),
            format!("lighting_dropout_p={}", self.lighting_dropout_p),
            format!("lighting_grid={}", self.lighting_grid),
            format!("resolution={}", self.resolution),
            format!("seed={}", self.seed),
            format!("stage={}", self.stage),
            format!("t_max={}", self.t_max),
            format!("variant={}", self.variant),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }
}

/// One view of a training tuple.
#[derive(Debug, Clone)]
pub struct ViewSample {
    /// Linear HDR radiance under the source environment.
    pub x_src: Array3<f32>,
    /// Linear HDR radiance under the target environment.
    pub x_tgt: Array3<f32>,
    /// Illumination-invariant materials, shared by src and tgt.
    pub materials: MaterialMaps,
    pub plucker: PluckerMap,
    pub camera: Camera,
    pub src_env_id: String,
    pub tgt_env_id: String,
}

/// The index part of a tuple draw, separated from image loading so the
/// sampling distribution can be tested without touching disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TupleIndices {
    pub object: usize,
    pub src_env: usize,
    pub tgt_env: usize,
    pub views: Vec<usize>,
}

/// Uniform draw: object, ordered (src, tgt) env pair with src ≠ tgt from
/// `envs`, and k distinct views.
pub fn sample_tuple_indices(
    n_objects: usize,
    n_views: usize,
    envs: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TupleIndices> {
    if n_objects == 0 {
        return Err(CoreError::Data("dataset has no objects".into()));
    }
    if envs.len() < 2 {
        return Err(CoreError::Data(format!(
            "training needs ≥ 2 environments, got {}",
            envs.len()
        )));
    }
    if n_views < k {
        return Err(CoreError::Data(format!("object has {n_views} views, tuple needs {k}")));
    }
    let object = rng.random_range(0..n_objects);
    let src_pos = rng.random_range(0..envs.len());
    let mut tgt_pos = rng.random_range(0..envs.len() - 1);
    if tgt_pos >= src_pos {
        tgt_pos += 1;
    }
    let views = rand::seq::index::sample(rng, n_views, k).into_vec();
    Ok(TupleIndices { object, src_env: envs[src_pos], tgt_env: envs[tgt_pos], views })
}

fn fit(img: &Array3<f32>, res: usize) -> Array3<f32> {
    let (h, w, _) = img.dim();
    if h == res && w == res {
        img.clone()
    } else {
        resize_area(img, res, res)
    }
}

/// Load the images behind a tuple draw at the stage resolution. Radiance and
/// materials are area-resampled; the Plücker map is recomputed exactly from
/// the camera at the target resolution.
pub fn load_tuple(
    ds: &Dataset,
    idx: &TupleIndices,
    resolution: usize,
) -> Result<(Vec<ViewSample>, EnvMap)> {
    let meta = ds.object_meta(idx.object)?;
    let cameras = ds.cameras(idx.object)?;
    let src_env_id = meta
        .env_ids
        .get(idx.src_env)
        .ok_or_else(|| CoreError::Bounds(format!("env {} of {}", idx.src_env, meta.env_ids.len())))?
        .clone();
    let tgt_env_id = meta
        .env_ids
        .get(idx.tgt_env)
        .ok_or_else(|| CoreError::Bounds(format!("env {} of {}", idx.tgt_env, meta.env_ids.len())))?
        .clone();
    let mut views = Vec::with_capacity(idx.views.len());
    for &v in &idx.views {
        let x_src = fit(&ds.radiance(idx.object, idx.src_env, v)?, resolution);
        let x_tgt = fit(&ds.radiance(idx.object, idx.tgt_env, v)?, resolution);
        let mats = ds.materials(idx.object, v)?;
        let i_d = fit(&mats.i_d, resolution);
        let i_orm = fit(&mats.i_orm, resolution);
        let mask = mask_from_orm(&i_orm);
        let camera = cameras
            .get(v)
            .ok_or_else(|| CoreError::Bounds(format!("view {v} of {}", cameras.len())))?
            .with_resolution((resolution, resolution));
        let plucker = plucker_map(&camera, resolution, resolution)?;
        views.push(ViewSample {
            x_src,
            x_tgt,
            materials: MaterialMaps { i_d, i_orm, mask },
            plucker,
            camera,
            src_env_id: src_env_id.clone(),
            tgt_env_id: tgt_env_id.clone(),
        });
    }
    Ok((views, ds.env(idx.tgt_env)?))
}

/// Draw and load one training tuple: k views sharing object, source env and
/// target env, plus the target environment map.
pub fn sample_training_tuple(
    ds: &Dataset,
    envs: &[usize],
    k: usize,
    resolution: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ViewSample>, EnvMap)> {
    let meta = ds.object_meta(0)?;
    let idx = sample_tuple_indices(ds.n_objects(), meta.cameras.len(), envs, k, rng)?;
    load_tuple(ds, &idx, resolution)
}

/// Per-purpose rng streams; independently seeded so consumers cannot
/// perturb each other's draws.
pub struct TrainRngs {
    pub sampler: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub dropout: ChaCha8Rng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            sampler: ChaCha8Rng::seed_from_u64(mix(seed, 0x01)),
            noise: ChaCha8Rng::seed_from_u64(mix(seed, 0x02)),
            dropout: ChaCha8Rng::seed_from_u64(mix(seed, 0x03)),
        }
    }
}

/// Bernoulli lighting dropout: with probability `p` replace the tokens by
/// their null twin (radiance zeroed, directions kept). Returns whether the
/// tokens were dropped.
pub fn lighting_dropout(
    tokens: LightingTokens<f32>,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> (LightingTokens<f32>, bool) {
    if rng.random::<f64>() < p {
        (tokens.to_null(), true)
    } else {
        (tokens, false)
    }
}

/// One optimizer step over a batch of tuples. Every view of a tuple shares
/// its timestep and lighting tokens; the loss is the mean squared error
/// between predicted and target v over all views, channels and pixels.
pub fn train_step(
    model: &Denoiser,
    store: &mut ParamStore<f32>,
    opt: &mut AdamW,
    schedule: &NoiseSchedule,
    batch: &[(Vec<ViewSample>, EnvMap)],
    cfg: &TrainConfig,
    rngs: &mut TrainRngs,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::Config("empty training batch".into()));
    }
    let k = cfg.effective_k();
    let codec = Codec::Pixel;
    let flags = cfg.flags();
    let mut tgt_model: Vec<Array3<f32>> = Vec::with_capacity(batch.len() * k);
    let mut packs = Vec::with_capacity(batch.len() * k);
    let mut ts: Vec<usize> = Vec::with_capacity(batch.len());
    let mut lighting: Vec<ndarray::Array2<f32>> = Vec::with_capacity(batch.len());
    for (views, env) in batch {
        if views.len() != k {
            return Err(CoreError::Shape(format!(
                "tuple has {} views, config wants {k}",
                views.len()
            )));
        }
        ts.push(rngs.noise.random_range(1..=schedule.t_max));
        let tokens = lighting_tokens::<f32>(env, cfg.lighting_grid, false)?;
        let (tokens, _) = lighting_dropout(tokens, cfg.lighting_dropout_p, &mut rngs.dropout);
        lighting.push(tokens.tokens);
        for view in views {
            tgt_model.push(image_to_model(&view.x_tgt));
            packs.push(build_conditioning(
                &image_to_model(&view.x_src),
                &view.materials.i_d,
                &view.materials.i_orm,
                &view.plucker,
                &codec,
                flags,
            )?);
        }
    }
    let z0 = encode_views::<f32>(&codec, &tgt_model)?;
    let cond = stack_packs::<f32>(&packs)?;
    let (_, c, h, w) = z0.dim();
    let mut z = Array4::<f32>::zeros(z0.raw_dim());
    let mut v_tgt = Array4::<f32>::zeros(z0.raw_dim());
    for (bi, &t_i) in ts.iter().enumerate() {
        let rows = s![bi * k..(bi + 1) * k, .., .., ..];
        let x0 = z0.slice(rows).to_owned();
        let eps =
            Array4::from_shape_fn((k, c, h, w), |_| rngs.noise.sample::<f32, _>(StandardNormal));
        z.slice_mut(rows).assign(&add_noise(&x0, &eps, t_i, schedule)?);
        v_tgt.slice_mut(rows).assign(&v_target(&x0, &eps, t_i, schedule)?);
    }
    let ts_f: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let input = ForwardInput { z: &z, cond: &cond, t: &ts_f, lighting: &lighting, views: k };
    let (pred, tape) = model.forward(store, &input)?;
    let (loss, dpred) = mse_loss(&pred, &v_tgt);
    if !loss.is_finite() {
        return Err(CoreError::Numeric(format!(
            "non-finite loss at stage {} (t = {ts:?})",
            cfg.stage
        )));
    }
    store.zero_grad();
    model.backward(store, &tape, &dpred);
    opt.step(store)?;
    Ok(loss as f64)
}

/// Per-iteration learning rate: linear warmup to `peak` over the first 5%
/// of the stage (at most 100 iterations), then cosine decay to zero. The
/// checkpoint is the last iterate, so letting the step size vanish at the
/// end of a stage removes most of the optimizer's endpoint noise; the
/// warmup protects the first steps after a stage handoff, when the new
/// attention blocks still carry fresh random weights.
pub fn lr_at(peak: f64, it: usize, iterations: usize) -> f64 {
    let warm = (iterations / 20).clamp(1, 100);
    if it < warm {
        peak * (it + 1) as f64 / warm as f64
    } else {
        let p = (it - warm) as f64 / (iterations - warm).max(1) as f64;
        peak * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Artifacts of one completed stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    pub first_loss: f64,
    pub last_loss: f64,
}

pub fn checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("ckpt_{stage}.rlck"))
}

/// Run the requested stages in order. The first stage may start from
/// scratch only if it is `single`; every other stage loads the checkpoint of
/// the stage trained immediately before it in this call, or its canonical
/// predecessor's checkpoint already in `out_dir`. A missing predecessor is a
/// configuration error. Writes per-stage checkpoints, loss CSVs and flat
/// key=value config echoes; deterministic given the seeds.
pub fn staged_train(
    ds: &Dataset,
    envs: &[usize],
    base_cfg: &UNetConfig,
    stages: &[TrainConfig],
    out_dir: &Path,
) -> Result<Vec<StageOutcome>> {
    if stages.is_empty() {
        return Err(CoreError::Config("no training stages requested".into()));
    }
    for pair in stages.windows(2) {
        if pair[1].stage.index() <= pair[0].stage.index() {
            return Err(CoreError::Config(format!(
                "stages must be ordered single → multi → upscale, got {} after {}",
                pair[1].stage, pair[0].stage
            )));
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut outcomes: Vec<StageOutcome> = Vec::with_capacity(stages.len());
    let mut prev_ckpt: Option<PathBuf> = None;
    for tc in stages {
        tc.validate()?;
        let mut cfg = base_cfg.clone();
        cfg.multi_view = tc.stage != Stage::Single;
        cfg.param_seed = mix(base_cfg.param_seed, tc.stage.index() as u64);
        let (model, mut store) = Denoiser::build::<f32>(cfg.clone())?;
        if let Some(prior) = tc.stage.predecessor() {
            let path =
                prev_ckpt.clone().unwrap_or_else(|| checkpoint_path(out_dir, prior));
            if !path.exists() {
                return Err(CoreError::Config(format!(
                    "stage {} needs the {} checkpoint at {}; train that stage first",
                    tc.stage,
                    prior,
                    path.display()
                )));
            }
            let (_, src) = relit_nn::load_checkpoint(&path)?;
            let copied = store.load_from(&src)?;
            log::info!("stage {}: initialized {copied} tensors from {}", tc.stage, path.display());
        }
        let schedule = NoiseSchedule::cosine(tc.t_max)?;
        let mut opt = AdamW::new(tc.learning_rate, store.len());
        let mut rngs = TrainRngs::new(mix(tc.seed, 0x57A6E + tc.stage.index() as u64));
        let k = tc.effective_k();
        let mut curve = String::from("iteration,loss\n");
        let mut first_loss = f64::NAN;
        let mut last_loss = f64::NAN;
        for it in 0..tc.iterations {
            opt.set_lr(lr_at(tc.learning_rate, it, tc.iterations));
            let mut batch = Vec::with_capacity(tc.batch_size);
            for _ in 0..tc.batch_size {
                batch.push(sample_training_tuple(ds, envs, k, tc.resolution, &mut rngs.sampler)?);
            }
            let loss = train_step(&model, &mut store, &mut opt, &schedule, &batch, tc, &mut rngs)?;
            if it == 0 {
                first_loss = loss;
            }
            last_loss = loss;
            curve.push_str(&format!("{it},{loss}\n"));
            if it % 100 == 0 || it + 1 == tc.iterations {
                log::info!("stage {} iter {it}/{}: loss {loss:.5}", tc.stage, tc.iterations);
            }
        }
        let ckpt = checkpoint_path(out_dir, tc.stage);
        save_checkpoint(&ckpt, &cfg, &store)?;
        let curve_path = out_dir.join(format!("loss_{}.csv", tc.stage));
        fs::write(&curve_path, curve)?;
        fs::write(out_dir.join(format!("stage_{}.cfg", tc.stage)), tc.to_kv())?;
        prev_ckpt = Some(ckpt.clone());
        outcomes.push(StageOutcome {
            stage: tc.stage,
            checkpoint: ckpt,
            loss_curve: curve_path,
            first_loss,
            last_loss,
        });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use relit_core::dataset::{render_dataset, DatasetConfig};
    use relit_nn::denoise;
    use tempfile::TempDir;

    fn micro_dataset(n_objects: usize, n_views: usize, n_envs: usize, res: usize) -> (TempDir, Dataset) {
        let dir = TempDir::new().unwrap();
        let config = DatasetConfig {
            n_objects,
            n_views,
            n_envs,
            resolution: res,
            env_height: 8,
            seed: 5,
            spp: 1,
            camera_radius: 2.5,
            fov_y: 50.0,
        };
        render_dataset(&config, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn lr_schedule_warms_up_then_decays_to_zero() {
        let peak = 2e-3;
        let n = 1000;
        let warm = 50; // n/20
        assert!(lr_at(peak, 0, n) < peak / 10.0);
        assert!((lr_at(peak, warm - 1, n) - peak).abs() < 1e-12);
        for it in warm..n - 1 {
            assert!(lr_at(peak, it + 1, n) <= lr_at(peak, it, n) + 1e-15);
        }
        assert!(lr_at(peak, n - 1, n) < peak / 100.0);
        // Degenerate stage lengths stay finite and positive.
        for n in [1usize, 2, 3, 19, 20] {
            for it in 0..n {
                let lr = lr_at(peak, it, n);
                assert!(lr.is_finite() && lr > 0.0, "lr_at({it}, {n}) = {lr}");
            }
        }
    }

    #[test]
    fn tuple_draw_shares_object_and_envs_without_replacement() {
        let (_dir, ds) = micro_dataset(2, 4, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (views, env) = sample_training_tuple(&ds, &[0, 1, 2], 3, 8, &mut rng).unwrap();
            assert_eq!(views.len(), 3);
            let src = &views[0].src_env_id;
            let tgt = &views[0].tgt_env_id;
            assert_ne!(src, tgt, "src and tgt env must differ");
            assert!(views.iter().all(|v| &v.src_env_id == src && &v.tgt_env_id == tgt));
            assert_eq!(env.id, *tgt, "returned env is the target env");
        }
        // Without replacement: view indices distinct at k = n_views.
        let idx = sample_tuple_indices(2, 4, &[0, 1, 2], 4, &mut rng).unwrap();
        let mut v = idx.views.clone();
        v.sort_unstable();
        v.dedup();
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn env_pair_frequencies_are_multinomial() {
        // 8 envs → 56 ordered pairs; 10^4 draws at p = 1/56: count within
        // 3σ = 3·√(n·p·(1−p)) ≈ 39.8 of the mean 178.6.
        let envs: Vec<usize> = (0..8).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut counts = std::collections::BTreeMap::<(usize, usize), usize>::new();
        for _ in 0..10_000 {
            let idx = sample_tuple_indices(3, 8, &envs, 2, &mut rng).unwrap();
            *counts.entry((idx.src_env, idx.tgt_env)).or_default() += 1;
        }
        assert_eq!(counts.len(), 56, "all ordered pairs should appear");
        for (&pair, &c) in &counts {
            assert_ne!(pair.0, pair.1);
            assert!(
                (139..=218).contains(&c),
                "pair {pair:?} count {c} outside 3σ window [139, 218]"
            );
        }
    }

    #[test]
    fn insufficient_views_or_envs_is_a_data_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_tuple_indices(2, 3, &[0, 1], 4, &mut rng),
            Err(CoreError::Data(_))
        ));
        assert!(matches!(
            sample_tuple_indices(2, 3, &[0], 2, &mut rng),
            Err(CoreError::Data(_))
        ));
    }

    #[test]
    fn dropout_frequency_tracks_p_and_boundaries() {
        let env = relit_core::envmap::make_procedural_env(3, 8).unwrap();
        let tokens = lighting_tokens::<f32>(&env, 4, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut dropped = 0usize;
        for _ in 0..10_000 {
            let (_, d) = lighting_dropout(tokens.clone(), 0.10, &mut rng);
            dropped += d as usize;
        }
        let rate = dropped as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&rate), "dropout rate {rate}");
        for _ in 0..100 {
            assert!(lighting_dropout(tokens.clone(), 1.0, &mut rng).1);
            assert!(!lighting_dropout(tokens.clone(), 0.0, &mut rng).1);
        }
    }

    #[test]
    fn single_view_variant_forces_k_1() {
        let mut tc = TrainConfig::for_stage(Stage::Multi);
        tc.variant = Variant::SingleView;
        assert_eq!(tc.effective_k(), 1);
        let tc2 = TrainConfig::for_stage(Stage::Single);
        assert_eq!(tc2.effective_k(), 1, "single stage is per-view by definition");
    }

    #[test]
    fn perfect_prediction_has_exactly_zero_loss() {
        // A freshly built model is the zero function (zero-init head), so
        // against a zero v-target the loss is exactly 0 — the "denoiser
        // outputs v_target exactly" boundary case.
        let cfg = UNetConfig::tiny();
        let (model, store) = Denoiser::build::<f32>(cfg.clone()).unwrap();
        let z = Array4::<f32>::zeros((2, 3, 8, 8));
        let cond = Array4::<f32>::zeros((2, cfg.cond_channels, 8, 8));
        let lighting = vec![ndarray::Array2::<f32>::zeros((8, 9))];
        let input = ForwardInput { z: &z, cond: &cond, t: &[10.0], lighting: &lighting, views: 2 };
        let (pred, _) = model.forward(&store, &input).unwrap();
        assert!(pred.iter().all(|&v| v == 0.0));
        let (loss, grad) = mse_loss(&pred, &Array4::<f32>::zeros(pred.raw_dim()));
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn train_step_reduces_loss_on_a_tiny_problem() {
        let (_dir, ds) = micro_dataset(1, 2, 2, 8);
        let mut tc = TrainConfig::for_stage(Stage::Multi);
        tc.k = 2;
        tc.resolution = 8;
        tc.learning_rate = 2e-3;
        tc.lighting_grid = 4;
        tc.t_max = 100;
        let mut cfg = UNetConfig::tiny();
        cfg.multi_view = true;
        let (model, mut store) = Denoiser::build::<f32>(cfg).unwrap();
        let schedule = NoiseSchedule::cosine(tc.t_max).unwrap();
        let mut opt = AdamW::new(tc.learning_rate, store.len());
        let mut rngs = TrainRngs::new(9);
        let mut losses = Vec::new();
        for _ in 0..40 {
            let batch =
                vec![sample_training_tuple(&ds, &[0, 1], 2, 8, &mut rngs.sampler).unwrap()];
            let loss =
                train_step(&model, &mut store, &mut opt, &schedule, &batch, &tc, &mut rngs)
                    .unwrap();
            assert!(loss.is_finite() && loss >= 0.0);
            losses.push(loss);
        }
        let head: f64 = losses[..8].iter().sum::<f64>() / 8.0;
        let tail: f64 = losses[32..].iter().sum::<f64>() / 8.0;
        assert!(tail < head, "loss did not decrease: head {head:.4}, tail {tail:.4}");
    }

    #[test]
    fn no_materials_variant_ignores_material_perturbations() {
        let (_dir, ds) = micro_dataset(1, 2, 2, 8);
        let mut tc = TrainConfig::for_stage(Stage::Multi);
        tc.k = 2;
        tc.resolution = 8;
        tc.lighting_grid = 4;
        tc.t_max = 100;
        tc.variant = Variant::NoMaterials;
        let mut sampler = ChaCha8Rng::seed_from_u64(4);
        let batch = vec![sample_training_tuple(&ds, &[0, 1], 2, 8, &mut sampler).unwrap()];
        let mut poisoned = batch.clone();
        for (views, _) in &mut poisoned {
            for view in views {
                view.materials.i_d.fill(0.77);
                view.materials.i_orm.fill(0.33);
            }
        }
        let run = |batch: &[(Vec<ViewSample>, EnvMap)]| -> f64 {
            let mut cfg = UNetConfig::tiny();
            cfg.multi_view = true;
            let (model, mut store) = Denoiser::build::<f32>(cfg).unwrap();
            let schedule = NoiseSchedule::cosine(tc.t_max).unwrap();
            let mut opt = AdamW::new(tc.learning_rate, store.len());
            let mut rngs = TrainRngs::new(21);
            train_step(&model, &mut store, &mut opt, &schedule, batch, &tc, &mut rngs).unwrap()
        };
        let a = run(&batch);
        let b = run(&poisoned);
        assert_eq!(a.to_bits(), b.to_bits(), "materials leaked into a no_materials step");
    }

    fn micro_stages(seed: u64) -> Vec<TrainConfig> {
        [Stage::Single, Stage::Multi, Stage::Upscale]
            .into_iter()
            .map(|stage| {
                let mut tc = TrainConfig::for_stage(stage);
                tc.k = 2;
                tc.iterations = if stage == Stage::Upscale { 2 } else { 3 };
                tc.resolution = if stage == Stage::Upscale { 16 } else { 8 };
                tc.learning_rate = 1e-3;
                tc.lighting_grid = 4;
                tc.t_max = 50;
                tc.seed = seed;
                tc
            })
            .collect()
    }

    #[test]
    fn staged_train_writes_artifacts_deterministically_and_hands_off() {
        let (_dir, ds) = micro_dataset(1, 2, 2, 16);
        let base = UNetConfig::tiny();
        let out_a = TempDir::new().unwrap();
        let out_b = TempDir::new().unwrap();
        let outcomes =
            staged_train(&ds, &[0, 1], &base, &micro_stages(3), out_a.path()).unwrap();
        staged_train(&ds, &[0, 1], &base, &micro_stages(3), out_b.path()).unwrap();
        assert_eq!(outcomes.len(), 3);
        for o in &outcomes {
            assert!(o.checkpoint.exists());
            assert!(o.loss_curve.exists());
            let curve = fs::read_to_string(&o.loss_curve).unwrap();
            let lines: Vec<&str> = curve.lines().collect();
            assert_eq!(lines[0], "iteration,loss");
            assert_eq!(lines.len() as usize, 1 + if o.stage == Stage::Upscale { 2 } else { 3 });
            // Same seed ⇒ identical loss curve.
            let twin = fs::read_to_string(
                out_b.path().join(o.loss_curve.file_name().unwrap()),
            )
            .unwrap();
            assert_eq!(curve, twin, "stage {} curve not reproducible", o.stage);
        }

        // Handoff: a multi-view model initialized from the trained single
        // checkpoint reproduces the single model's function on one view.
        let (single_cfg, single_store) =
            relit_nn::load_checkpoint(&checkpoint_path(out_a.path(), Stage::Single)).unwrap();
        let (single_model, _) = Denoiser::build::<f32>(single_cfg.clone()).unwrap();
        let mut multi_cfg = single_cfg.clone();
        multi_cfg.multi_view = true;
        multi_cfg.param_seed = single_cfg.param_seed.wrapping_add(1);
        let (multi_model, mut multi_store) = Denoiser::build::<f32>(multi_cfg).unwrap();
        multi_store.load_from(&single_store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array4::from_shape_fn((1, 3, 8, 8), |_| rng.sample::<f32, _>(StandardNormal));
        let cond = Array4::from_shape_fn((1, single_cfg.cond_channels, 8, 8), |_| {
            rng.sample::<f32, _>(StandardNormal)
        });
        let env = relit_core::envmap::make_procedural_env(8, 8).unwrap();
        let tokens = lighting_tokens::<f32>(&env, 4, false).unwrap();
        let a = denoise(&single_model, &single_store, &z, 25.0, &cond, &tokens).unwrap();
        let b = denoise(&multi_model, &multi_store, &z, 25.0, &cond, &tokens).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-5, "handoff drift {x} vs {y}");
        }
    }

    #[test]
    fn missing_prior_checkpoint_is_a_config_error() {
        let (_dir, ds) = micro_dataset(1, 2, 2, 8);
        let out = TempDir::new().unwrap();
        let stages: Vec<TrainConfig> = micro_stages(1).into_iter().skip(1).collect();
        let err = staged_train(&ds, &[0, 1], &UNetConfig::tiny(), &stages, out.path());
        assert!(matches!(err, Err(CoreError::Config(_))), "{err:?}");
    }

    #[test]
    fn out_of_order_stages_are_rejected() {
        let (_dir, ds) = micro_dataset(1, 2, 2, 8);
        let out = TempDir::new().unwrap();
        let mut stages = micro_stages(1);
        stages.swap(0, 1);
        assert!(matches!(
            staged_train(&ds, &[0, 1], &UNetConfig::tiny(), &stages, out.path()),
            Err(CoreError::Config(_))
        ));
    }
}
