//! Toy end-to-end relighting experiment.
//!
//! Renders a small procedural dataset, trains the three stages for each
//! requested ablation variant and seed, then relights every object's views
//! under a held-out environment and scores SLR/ILR PSNR. Also compares the
//! per-view optimal-scale spread of shuffled group denoising (g = k) against
//! independent denoising (g = 1) on the full model.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use relit_core::dataset::{mask_from_orm, render_dataset, Dataset, DatasetConfig};
use relit_core::diffusion::{NoiseSchedule, SamplerMode};
use relit_core::metrics::{evaluate, EvalView, ObjectEval, RescaleMode};
use relit_core::resample::resize_area;
use relit_core::{CoreError, Result};
use relit_nn::{load_model, UNetConfig};

use crate::scheduler::{relight, RelightConfig, SourceView};
use crate::trainer::{staged_train, Stage, TrainConfig, Variant};

/// Knobs for one toy experiment run.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub out_dir: PathBuf,
    /// Use an existing dataset instead of rendering one under `out_dir`.
    pub data_dir: Option<PathBuf>,
    pub objects: usize,
    pub views: usize,
    /// Environments 0..train_envs train; train_envs is held out for eval.
    pub train_envs: usize,
    /// Resolution the dataset is rendered at (the final-stage resolution).
    pub data_resolution: usize,
    pub env_height: usize,
    pub dataset_seed: u64,
    /// Per-stage (single, multi, upscale) training resolutions.
    pub stage_resolutions: [usize; 3],
    pub stage_iterations: [usize; 3],
    /// Single-stage learning rate; later stages step down ×2 then ×2.5.
    pub base_lr: f64,
    pub batch_size: usize,
    pub k: usize,
    pub t_max: usize,
    pub lighting_grid: usize,
    pub model: UNetConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Source environment shown to the model at relight time.
    pub src_env: usize,
    pub relight_steps: usize,
    pub guidance_scale: f64,
    /// Relight seeds for the scale-spread comparison.
    pub spread_seeds: Vec<u64>,
}

impl ToyConfig {
    /// The acceptance-scale experiment: 8 objects × 8 views, 4 train envs +
    /// 1 held-out, data at 64×64 with staged training 32 → 32 → 64.
    pub fn acceptance(out_dir: &Path) -> Self {
        let mut model = UNetConfig::base();
        model.base_channels = 16;
        model.channel_mults = vec![1, 2, 4];
        model.groups = 8;
        model.attn_levels = 1;
        model.lighting_levels = 2;
        Self {
            out_dir: out_dir.to_path_buf(),
            data_dir: None,
            objects: 8,
            views: 8,
            train_envs: 4,
            data_resolution: 64,
            env_height: 16,
            dataset_seed: 11,
            stage_resolutions: [32, 32, 64],
            stage_iterations: [1600, 1200, 1400],
            base_lr: 2e-3,
            batch_size: 1,
            k: 4,
            t_max: 1000,
            lighting_grid: 8,
            model,
            variants: vec![Variant::Full, Variant::NoMaterials, Variant::SingleView],
            seeds: vec![1, 2, 3],
            src_env: 0,
            relight_steps: 12,
            guidance_scale: 3.0,
            spread_seeds: vec![101, 102, 103],
        }
    }

    pub fn held_out_env(&self) -> usize {
        self.train_envs
    }

    fn stage_configs(&self, variant: Variant, seed: u64) -> Vec<TrainConfig> {
        let lrs = [self.base_lr, self.base_lr / 2.0, self.base_lr / 5.0];
        [Stage::Single, Stage::Multi, Stage::Upscale]
            .into_iter()
            .enumerate()
            .map(|(i, stage)| {
                let mut tc = TrainConfig::for_stage(stage);
                tc.k = self.k;
                tc.batch_size = self.batch_size;
                tc.learning_rate = lrs[i];
                tc.iterations = self.stage_iterations[i];
                tc.resolution = self.stage_resolutions[i];
                tc.seed = seed;
                tc.variant = variant;
                tc.lighting_grid = self.lighting_grid;
                tc.t_max = self.t_max;
                tc.guidance_scale = self.guidance_scale;
                tc
            })
            .collect()
    }
}

/// SLR/ILR summary for one trained run.
#[derive(Debug, Clone, Serialize)]
pub struct RunScore {
    pub variant: String,
    pub seed: u64,
    pub slr_psnr: f64,
    pub ilr_psnr: f64,
    pub slr_ssim: f64,
    pub final_loss: f64,
    pub initial_loss: f64,
}

/// Scale spread (std of per-view ILR scales, averaged over objects) for the
/// grouped and independent schedules.
#[derive(Debug, Clone, Serialize)]
pub struct SpreadScore {
    pub relight_seed: u64,
    pub spread_grouped: f64,
    pub spread_independent: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyOutcome {
    pub runs: Vec<RunScore>,
    /// Seeds (of `seeds`) on which full ≥ no_materials ≥ single_view held.
    pub ordering_ok_seeds: usize,
    pub spreads: Vec<SpreadScore>,
    pub dataset_root: PathBuf,
}

impl ToyOutcome {
    pub fn mean_slr(&self, variant: Variant) -> f64 {
        let vals: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant.as_str())
            .map(|r| r.slr_psnr)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

/// Render the toy dataset (train envs + one held-out) if not already on
/// disk from an identical config.
pub fn ensure_dataset(cfg: &ToyConfig) -> Result<Dataset> {
    if let Some(dir) = &cfg.data_dir {
        return Dataset::open(dir);
    }
    let root = cfg.out_dir.join("data");
    let marker = root.join("dataset.json");
    if !marker.exists() {
        let dc = DatasetConfig {
            n_objects: cfg.objects,
            n_views: cfg.views,
            n_envs: cfg.train_envs + 1,
            resolution: cfg.data_resolution,
            env_height: cfg.env_height,
            seed: cfg.dataset_seed,
            spp: 1,
            camera_radius: 2.5,
            fov_y: 50.0,
        };
        render_dataset(&dc, &root)?;
    }
    Dataset::open(&root)
}

/// The source views of one object at `resolution`, observed under
/// `src_env`, for feeding the relight scheduler.
pub fn source_views(
    ds: &Dataset,
    object: usize,
    src_env: usize,
    resolution: usize,
) -> Result<Vec<SourceView>> {
    let cameras = ds.cameras(object)?;
    let mut out = Vec::with_capacity(cameras.len());
    for (v, cam) in cameras.iter().enumerate() {
        let x_src = resize_to(&ds.radiance(object, src_env, v)?, resolution);
        let mats = ds.materials(object, v)?;
        out.push(SourceView {
            x_src,
            i_d: resize_to(&mats.i_d, resolution),
            i_orm: resize_to(&mats.i_orm, resolution),
            camera: cam.with_resolution((resolution, resolution)),
        });
    }
    Ok(out)
}

fn resize_to(img: &ndarray::Array3<f32>, res: usize) -> ndarray::Array3<f32> {
    let (h, w, _) = img.dim();
    if h == res && w == res {
        img.clone()
    } else {
        resize_area(img, res, res)
    }
}

/// Tonemap a linear HDR image into the [0,1] display range used by the
/// metrics.
pub fn display(img: &ndarray::Array3<f32>) -> ndarray::Array3<f32> {
    img.mapv(|x| relit_core::math::tonemap(x as f64) as f32)
}

/// Relight every object under the held-out env with the given checkpoint
/// and collect metric-ready views (predictions vs held-out ground truth).
pub fn eval_views_for_checkpoint(
    ds: &Dataset,
    cfg: &ToyConfig,
    ckpt: &Path,
    group_size: usize,
    flags: relit_nn::ConditioningFlags,
    relight_seed: u64,
) -> Result<Vec<ObjectEval>> {
    let (model, store) = load_model::<f32>(ckpt)?;
    let schedule = NoiseSchedule::cosine(cfg.t_max)?;
    let res = cfg.stage_resolutions[2];
    let held = cfg.held_out_env();
    let rc = RelightConfig {
        steps: cfg.relight_steps,
        group_size,
        guidance_scale: cfg.guidance_scale as f32,
        workers: 1,
        seed: relight_seed,
        sampler: SamplerMode::Ddim,
        lighting_grid: cfg.lighting_grid,
        flags,
    };
    let env = ds.env(held)?;
    let mut objects = Vec::with_capacity(ds.n_objects());
    for o in 0..ds.n_objects() {
        let views = source_views(ds, o, cfg.src_env, res)?;
        let preds = relight(&model, &store, &schedule, &views, &env, &rc)?;
        let mut eval_views = Vec::with_capacity(preds.len());
        for (v, pred) in preds.into_iter().enumerate() {
            let gt = resize_to(&ds.radiance(o, held, v)?, res);
            let mask = mask_from_orm(&views[v].i_orm);
            // Metrics live in display space: tonemap both sides so values sit
            // in [0,1] and the rescaling stays a well-posed least-squares fit.
            eval_views.push(EvalView { pred: display(&pred), gt: display(&gt), mask });
        }
        objects.push(ObjectEval {
            object_id: ds.meta.objects[o].clone(),
            views: eval_views,
        });
    }
    Ok(objects)
}

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean over objects of the std of per-view ILR scales.
pub fn scale_spread(objects: &[ObjectEval]) -> Result<f64> {
    let mut spreads = Vec::with_capacity(objects.len());
    for obj in objects {
        let report = evaluate(std::slice::from_ref(obj), RescaleMode::Ilr)?;
        let scales: Vec<f64> =
            report.per_object[0].views.iter().map(|v| v.scale).collect();
        spreads.push(std_dev(&scales));
    }
    Ok(spreads.iter().sum::<f64>() / spreads.len().max(1) as f64)
}

/// Train and evaluate every (variant, seed) combination, then run the
/// spread comparison on the full model's first seed. Writes `report.json`
/// into the output directory and returns the summary.
pub fn run_toy_experiment(cfg: &ToyConfig) -> Result<ToyOutcome> {
    fs::create_dir_all(&cfg.out_dir)?;
    let ds = ensure_dataset(cfg)?;
    let train_envs: Vec<usize> = (0..cfg.train_envs).collect();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &variant in &cfg.variants {
            let run_dir = cfg.out_dir.join(format!("{}_s{}", variant.as_str(), seed));
            let stages = cfg.stage_configs(variant, seed);
            let final_ckpt = crate::trainer::checkpoint_path(&run_dir, Stage::Upscale);
            let (initial_loss, final_loss) = if final_ckpt.exists() {
                (f64::NAN, f64::NAN)
            } else {
                let outcomes = staged_train(&ds, &train_envs, &cfg.model, &stages, &run_dir)?;
                let first = outcomes.first().map(|o| o.first_loss).unwrap_or(f64::NAN);
                let last = outcomes.last().map(|o| o.last_loss).unwrap_or(f64::NAN);
                (first, last)
            };
            let flags = stages[0].flags();
            let group = if variant == Variant::SingleView { 1 } else { cfg.k };
            let objects = eval_views_for_checkpoint(
                &ds,
                cfg,
                &final_ckpt,
                group,
                flags,
                cfg.spread_seeds[0],
            )?;
            let slr = evaluate(&objects, RescaleMode::Slr)?;
            let ilr = evaluate(&objects, RescaleMode::Ilr)?;
            log::info!(
                "toy run {variant} seed {seed}: SLR {:.2} dB, ILR {:.2} dB",
                slr.dataset_mean_psnr,
                ilr.dataset_mean_psnr
            );
            runs.push(RunScore {
                variant: variant.as_str().to_string(),
                seed,
                slr_psnr: slr.dataset_mean_psnr,
                ilr_psnr: ilr.dataset_mean_psnr,
                slr_ssim: slr.dataset_mean_ssim,
                final_loss,
                initial_loss,
            });
        }
    }

    let ordering_ok_seeds = cfg
        .seeds
        .iter()
        .filter(|&&seed| {
            let get = |variant: Variant| {
                runs.iter()
                    .find(|r| r.seed == seed && r.variant == variant.as_str())
                    .map(|r| r.slr_psnr)
            };
            match (get(Variant::Full), get(Variant::NoMaterials), get(Variant::SingleView)) {
                (Some(f), Some(n), Some(s)) => f >= n && n >= s,
                _ => false,
            }
        })
        .count();

    // Spread comparison g = k vs g = 1 on the full model, first seed.
    let mut spreads = Vec::new();
    if cfg.variants.contains(&Variant::Full) {
        let run_dir = cfg.out_dir.join(format!("full_s{}", cfg.seeds[0]));
        let ckpt = crate::trainer::checkpoint_path(&run_dir, Stage::Upscale);
        let flags = relit_nn::ConditioningFlags::default();
        for &rs in &cfg.spread_seeds {
            let grouped = eval_views_for_checkpoint(&ds, cfg, &ckpt, cfg.k, flags, rs)?;
            let independent = eval_views_for_checkpoint(&ds, cfg, &ckpt, 1, flags, rs)?;
            spreads.push(SpreadScore {
                relight_seed: rs,
                spread_grouped: scale_spread(&grouped)?,
                spread_independent: scale_spread(&independent)?,
            });
        }
    }

    let outcome = ToyOutcome {
        runs,
        ordering_ok_seeds,
        spreads,
        dataset_root: ds.root.clone(),
    };
    fs::write(
        cfg.out_dir.join("report.json"),
        serde_json::to_string_pretty(&outcome).map_err(CoreError::from)?,
    )?;
    Ok(outcome)
}
