//! `relit eval`: relight a dataset's objects with a checkpoint and score
//! them against ground truth under the target environment.
//!
//! Metrics run in display space (Reinhard + gamma) with either single-image
//! rescaling (SLR) or one scale per illumination across views (ILR).

use std::fs;
use std::path::PathBuf;

use ndarray::Array3;
use relit_core::dataset::{mask_from_orm, Dataset};
use relit_core::diffusion::{NoiseSchedule, SamplerMode};
use relit_core::metrics::{evaluate, EvalView, ObjectEval, RescaleMode};
use relit_core::resample::resize_area;
use relit_core::{CoreError, Result};
use relit_nn::{load_model, ConditioningFlags};
use relit_pipeline::experiment::{display, source_views};
use relit_pipeline::{RelightConfig, Variant};

use crate::config::Resolver;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Flat key=value config file; explicit flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (a gen-data output directory).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained checkpoint (.rlck).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory for eval.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// slr | ilr.
    #[arg(long)]
    rescale: Option<String>,
    /// Environment index the source views are lit by.
    #[arg(long)]
    src_env: Option<usize>,
    /// Environment index to relight under (default: last).
    #[arg(long)]
    target_env: Option<usize>,
    /// Evaluation resolution (default: the dataset's).
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    /// Denoising steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Lighting token grid height (width is twice this).
    #[arg(long)]
    lighting_grid: Option<usize>,
    /// Noise-schedule step count T the checkpoint was trained with.
    #[arg(long)]
    t_max: Option<usize>,
    /// Conditioning variant the checkpoint was trained with.
    #[arg(long)]
    variant: Option<String>,
}

fn resize_to(img: &Array3<f32>, res: usize) -> Array3<f32> {
    let (h, w, _) = img.dim();
    if h == res && w == res {
        img.clone()
    } else {
        resize_area(img, res, res)
    }
}

pub fn run(args: Args) -> Result<()> {
    let mut r = Resolver::new(args.config.as_deref())?;
    let data = r.required_path("data", args.data)?;
    let ckpt = r.required_path("ckpt", args.ckpt)?;
    let out = r.required_path("out", args.out)?;
    let rescale = r.parse_or("rescale", args.rescale, "slr".to_string())?;
    let mode = match rescale.as_str() {
        "slr" => RescaleMode::Slr,
        "ilr" => RescaleMode::Ilr,
        other => {
            return Err(CoreError::Config(format!(
                "unknown rescale mode {other:?} (want slr|ilr)"
            )));
        }
    };

    let ds = Dataset::open(&data)?;
    let n_envs = ds.meta.config.n_envs;
    let src_env = r.parse_or("src_env", args.src_env, 0)?;
    let target_env = r.parse_or("target_env", args.target_env, n_envs.saturating_sub(1))?;
    let res = r.parse_or("res", args.res, ds.meta.config.resolution)?;
    let group_size = r.parse_or("group_size", args.group_size, 4)?;
    let steps = r.parse_or("steps", args.steps, 50)?;
    let guidance = r.parse_or("guidance", args.guidance, 3.0)?;
    let workers = r.parse_or("workers", args.workers, 1)?;
    let seed = r.parse_or("seed", args.seed, 0u64)?;
    let lighting_grid = r.parse_or("lighting_grid", args.lighting_grid, 8)?;
    let t_max = r.parse_or("t_max", args.t_max, 1000)?;
    let variant = Variant::parse(&r.parse_or("variant", args.variant, "full".to_string())?)?;
    let resolved = r.finish()?;

    let (model, store) = load_model::<f32>(&ckpt)?;
    let schedule = NoiseSchedule::cosine(t_max)?;
    let rc = RelightConfig {
        steps,
        group_size,
        guidance_scale: guidance as f32,
        workers,
        seed,
        sampler: SamplerMode::Ddim,
        lighting_grid,
        flags: ConditioningFlags {
            materials_present: variant != Variant::NoMaterials,
            plucker_present: true,
        },
    };
    let env = ds.env(target_env)?;
    let mut objects = Vec::with_capacity(ds.n_objects());
    for o in 0..ds.n_objects() {
        let views = source_views(&ds, o, src_env, res)?;
        let preds = relit_pipeline::relight(&model, &store, &schedule, &views, &env, &rc)?;
        let mut eval_views = Vec::with_capacity(preds.len());
        for (v, pred) in preds.into_iter().enumerate() {
            let gt = resize_to(&ds.radiance(o, target_env, v)?, res);
            let mask = mask_from_orm(&views[v].i_orm);
            eval_views.push(EvalView { pred: display(&pred), gt: display(&gt), mask });
        }
        objects.push(ObjectEval { object_id: ds.meta.objects[o].clone(), views: eval_views });
    }
    let report = evaluate(&objects, mode)?;

    fs::create_dir_all(&out)?;
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
    resolved.write(&out.join("eval.cfg"))?;
    println!(
        "{rescale} over {} objects: mean PSNR {:.2} dB, mean SSIM {:.3}",
        objects.len(),
        report.dataset_mean_psnr,
        report.dataset_mean_ssim
    );
    Ok(())
}
