//! `relit train`: staged diffusion training on a rendered dataset.

use std::path::PathBuf;

use relit_core::dataset::Dataset;
use relit_core::Result;
use relit_nn::UNetConfig;
use relit_pipeline::{staged_train, Stage, TrainConfig, Variant};

use crate::config::{parse_list, Resolver};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Flat key=value config file; explicit flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (a gen-data output directory).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for checkpoints, loss curves, and configs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// single | multi | upscale | all.
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// full | no_materials | single_view.
    #[arg(long)]
    variant: Option<String>,
    /// Comma-separated environment indices to train on (default: all).
    #[arg(long)]
    envs: Option<String>,
    /// Override the per-stage default iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Override the per-stage default learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the per-stage default training resolution.
    #[arg(long)]
    res: Option<usize>,
    /// Views per tuple in multi-view stages.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Noise-schedule step count T.
    #[arg(long)]
    t_max: Option<usize>,
    /// Lighting token grid height (width is twice this).
    #[arg(long)]
    lighting_grid: Option<usize>,
    /// Lighting dropout probability for classifier-free guidance.
    #[arg(long)]
    dropout: Option<f64>,
    /// Guidance scale recorded for inference.
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Comma-separated channel multipliers, e.g. 1,2,4.
    #[arg(long)]
    mults: Option<String>,
    /// Group-norm group count.
    #[arg(long)]
    groups: Option<usize>,
    /// Coarsest levels with self/multi-view attention.
    #[arg(long)]
    attn_levels: Option<usize>,
    /// Coarsest levels with lighting cross-attention.
    #[arg(long)]
    lighting_levels: Option<usize>,
}

pub fn run(args: Args) -> Result<()> {
    let mut r = Resolver::new(args.config.as_deref())?;
    let data = r.required_path("data", args.data)?;
    let out = r.required_path("out", args.out)?;
    let stage_sel = r.parse_or("stage", args.stage, "all".to_string())?;
    let seed = r.parse_or("seed", args.seed, 0u64)?;
    let variant = Variant::parse(&r.parse_or("variant", args.variant, "full".to_string())?)?;
    let envs_raw = r.parse_opt("envs", args.envs)?;
    let iterations = r.parse_opt("iterations", args.iterations)?;
    let lr = r.parse_opt("lr", args.lr)?;
    let res = r.parse_opt("res", args.res)?;
    let k = r.parse_opt("k", args.k)?;
    let batch_size = r.parse_opt("batch_size", args.batch_size)?;
    let t_max = r.parse_opt("t_max", args.t_max)?;
    let lighting_grid = r.parse_opt("lighting_grid", args.lighting_grid)?;
    let dropout = r.parse_opt("dropout", args.dropout)?;
    let guidance = r.parse_opt("guidance", args.guidance)?;

    let mut model = UNetConfig::base();
    model.base_channels = r.parse_or("base_channels", args.base_channels, model.base_channels)?;
    let mults_raw = r.parse_or("mults", args.mults, "1,2,4".to_string())?;
    model.channel_mults = parse_list("mults", &mults_raw)?;
    model.groups = r.parse_or("groups", args.groups, model.groups)?;
    model.attn_levels = r.parse_or("attn_levels", args.attn_levels, model.attn_levels)?;
    model.lighting_levels =
        r.parse_or("lighting_levels", args.lighting_levels, model.lighting_levels)?;
    model.param_seed = seed;
    let resolved = r.finish()?;

    let selected: Vec<Stage> = match stage_sel.as_str() {
        "all" => vec![Stage::Single, Stage::Multi, Stage::Upscale],
        other => vec![Stage::parse(other)?],
    };
    let mut stages = Vec::with_capacity(selected.len());
    for &stage in &selected {
        let mut tc = TrainConfig::for_stage(stage);
        tc.seed = seed;
        tc.variant = variant;
        if let Some(v) = iterations {
            tc.iterations = v;
        }
        if let Some(v) = lr {
            tc.learning_rate = v;
        }
        if let Some(v) = res {
            tc.resolution = v;
        }
        if let Some(v) = k {
            tc.k = v;
        }
        if let Some(v) = batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = t_max {
            tc.t_max = v;
        }
        if let Some(v) = lighting_grid {
            tc.lighting_grid = v;
        }
        if let Some(v) = dropout {
            tc.lighting_dropout_p = v;
        }
        if let Some(v) = guidance {
            tc.guidance_scale = v;
        }
        stages.push(tc);
    }

    let ds = Dataset::open(&data)?;
    let envs: Vec<usize> = match envs_raw {
        Some(raw) => parse_list("envs", &raw)?,
        None => (0..ds.meta.config.n_envs).collect(),
    };
    let outcomes = staged_train(&ds, &envs, &model, &stages, &out)?;
    resolved.write(&out.join("train.cfg"))?;
    for o in &outcomes {
        println!(
            "stage {}: loss {:.4} -> {:.4}, checkpoint {}",
            o.stage,
            o.first_loss,
            o.last_loss,
            o.checkpoint.display()
        );
    }
    Ok(())
}
