//! `relit relight`: shuffled-group denoising of source views under a new
//! environment map.
//!
//! The view directory is expected to follow the dataset layout: it holds
//! `view_<i>.rfi` images and sits inside an object directory whose
//! `meta.json` records the cameras, with ground-truth materials in a
//! sibling `materials/` directory unless `--materials` points elsewhere.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use relit_core::dataset::{CameraMeta, ObjectMeta};
use relit_core::diffusion::{NoiseSchedule, SamplerMode};
use relit_core::envmap::EnvMap;
use relit_core::rfi::{read_rfi, write_rfi};
use relit_core::{CoreError, Result};
use relit_nn::{load_model, ConditioningFlags};
use relit_pipeline::{insert_novel_view, RelightConfig, SourceView, Variant};

use crate::config::Resolver;
use crate::preview;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Flat key=value config file; explicit flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint (.rlck).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Directory of view_<i>.rfi source images inside a dataset object.
    #[arg(long)]
    views: Option<PathBuf>,
    /// Target environment map (.rfi).
    #[arg(long)]
    env: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Material maps directory (default: <views>/../materials).
    #[arg(long)]
    materials: Option<PathBuf>,
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
    /// Extra source image for a camera outside the view directory.
    #[arg(long)]
    novel_view: Option<PathBuf>,
    /// CameraMeta JSON for --novel-view.
    #[arg(long)]
    novel_camera: Option<PathBuf>,
}

/// The object metadata governing a view directory: `<views>/meta.json` if
/// present, else `<views>/../meta.json` (the dataset layout).
fn object_meta_for(views_dir: &Path) -> Result<ObjectMeta> {
    let mut candidates = vec![views_dir.join("meta.json")];
    if let Some(parent) = views_dir.parent() {
        candidates.push(parent.join("meta.json"));
    }
    for path in &candidates {
        if path.exists() {
            let text = fs::read_to_string(path)?;
            return Ok(serde_json::from_str(&text)?);
        }
    }
    Err(CoreError::Data(format!(
        "no meta.json in or beside {}",
        views_dir.display()
    )))
}

fn read_square(path: &Path, what: &str) -> Result<Array3<f32>> {
    if !path.exists() {
        return Err(CoreError::Data(format!("{what} not found at {}", path.display())));
    }
    let img = read_rfi(path)?;
    let (h, w, _) = img.dim();
    if h != w {
        return Err(CoreError::Shape(format!(
            "{what} {} is {w}x{h}, want square",
            path.display()
        )));
    }
    Ok(img)
}

/// Load one view's image + materials, checking every map agrees on size.
fn load_view(
    img_path: &Path,
    d_path: &Path,
    orm_path: &Path,
    cam: &CameraMeta,
    what: &str,
) -> Result<SourceView> {
    let x_src = read_square(img_path, what)?;
    let res = x_src.dim().0;
    let i_d = read_square(d_path, &format!("{what} albedo map"))?;
    let i_orm = read_square(orm_path, &format!("{what} ORM map"))?;
    for (name, img) in [("albedo", &i_d), ("ORM", &i_orm)] {
        if img.dim().0 != res {
            return Err(CoreError::Shape(format!(
                "{what} {name} map is {}x{}, view is {res}x{res}",
                img.dim().1,
                img.dim().0
            )));
        }
    }
    let camera = cam.to_camera((res, res))?;
    Ok(SourceView { x_src, i_d, i_orm, camera })
}

pub fn run(args: Args) -> Result<()> {
    let mut r = Resolver::new(args.config.as_deref())?;
    let ckpt = r.required_path("ckpt", args.ckpt)?;
    let views_dir = r.required_path("views", args.views)?;
    let env_path = r.required_path("env", args.env)?;
    let out = r.required_path("out", args.out)?;
    let materials = r.path_opt("materials", args.materials);
    let group_size = r.parse_or("group_size", args.group_size, 4)?;
    let steps = r.parse_or("steps", args.steps, 50)?;
    let guidance = r.parse_or("guidance", args.guidance, 3.0)?;
    let workers = r.parse_or("workers", args.workers, 1)?;
    let seed = r.parse_or("seed", args.seed, 0u64)?;
    let lighting_grid = r.parse_or("lighting_grid", args.lighting_grid, 8)?;
    let t_max = r.parse_or("t_max", args.t_max, 1000)?;
    let variant = Variant::parse(&r.parse_or("variant", args.variant, "full".to_string())?)?;
    let novel_view = r.path_opt("novel_view", args.novel_view);
    let novel_camera = r.path_opt("novel_camera", args.novel_camera);
    let resolved = r.finish()?;

    let meta = object_meta_for(&views_dir)?;
    let mat_dir = materials.unwrap_or_else(|| match views_dir.parent() {
        Some(parent) => parent.join("materials"),
        None => views_dir.join("materials"),
    });

    let mut views: Vec<SourceView> = Vec::new();
    for i in 0.. {
        let img_path = views_dir.join(format!("view_{i}.rfi"));
        if !img_path.exists() {
            break;
        }
        let Some(cam) = meta.cameras.get(i) else {
            return Err(CoreError::Data(format!(
                "view {i} has no camera; meta.json lists {}",
                meta.cameras.len()
            )));
        };
        let view = load_view(
            &img_path,
            &mat_dir.join(format!("view_{i}_d.rfi")),
            &mat_dir.join(format!("view_{i}_orm.rfi")),
            cam,
            &format!("view {i}"),
        )?;
        if view.x_src.dim() != views.first().map_or(view.x_src.dim(), |v| v.x_src.dim()) {
            return Err(CoreError::Shape(format!(
                "view {i} resolution differs from view 0"
            )));
        }
        views.push(view);
    }
    if views.is_empty() {
        return Err(CoreError::Data(format!(
            "no view_<i>.rfi images in {}",
            views_dir.display()
        )));
    }
    let res = views[0].x_src.dim().0;

    let n_base = views.len();
    match (novel_view, novel_camera) {
        (None, None) => {}
        (Some(img_path), Some(cam_path)) => {
            let text = fs::read_to_string(&cam_path).map_err(|e| {
                CoreError::Data(format!("novel camera {}: {e}", cam_path.display()))
            })?;
            let cam: CameraMeta = serde_json::from_str(&text)?;
            let stem = img_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let view = load_view(
                &img_path,
                &img_path.with_file_name(format!("{stem}_d.rfi")),
                &img_path.with_file_name(format!("{stem}_orm.rfi")),
                &cam,
                "novel view",
            )?;
            if view.x_src.dim().0 != res {
                return Err(CoreError::Shape(format!(
                    "novel view is {}x{0}, batch views are {res}x{res}",
                    view.x_src.dim().0
                )));
            }
            insert_novel_view(&mut views, view);
        }
        _ => {
            return Err(CoreError::Config(
                "--novel-view and --novel-camera must be given together".into(),
            ));
        }
    }

    let radiance = read_rfi(&env_path)?;
    let env_id = env_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "env".into());
    let env = EnvMap::new(radiance, env_id)?;
    if env.height() != meta.env_height {
        return Err(CoreError::Shape(format!(
            "environment height {} does not match the dataset's env_height {}",
            env.height(),
            meta.env_height
        )));
    }

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
    let t0 = Instant::now();
    let relit = relit_pipeline::relight(&model, &store, &schedule, &views, &env, &rc)?;
    let dt = t0.elapsed();

    fs::create_dir_all(&out)?;
    let mut outputs = Vec::with_capacity(relit.len());
    for (i, img) in relit.iter().enumerate() {
        let path = out.join(format!("relit_{i}.rfi"));
        write_rfi(&path, img)?;
        preview::write_preview(&preview::preview_path(&path), img)?;
        outputs.push(format!("relit_{i}.rfi"));
    }
    let report = serde_json::json!({
        "checkpoint": ckpt.display().to_string(),
        "environment": env.id,
        "n_views": views.len(),
        "novel_view": views.len() > n_base,
        "steps": steps,
        "group_size": group_size,
        "guidance_scale": guidance,
        "workers": workers,
        "seed": seed,
        "duration_s": dt.as_secs_f64(),
        "outputs": outputs,
    });
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    resolved.write(&out.join("relight.cfg"))?;
    println!(
        "relit {} views under {} in {:.2}s -> {}",
        views.len(),
        env.id,
        dt.as_secs_f64(),
        out.display()
    );
    Ok(())
}
