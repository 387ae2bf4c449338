//! `relit gen-data`: render a procedural PBR dataset to disk.

use std::path::PathBuf;

use relit_core::dataset::{render_dataset, DatasetConfig};
use relit_core::Result;

use crate::config::Resolver;
use crate::preview;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Flat key=value config file; explicit flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    objects: Option<usize>,
    /// Camera poses per object.
    #[arg(long)]
    views: Option<usize>,
    /// Environment maps each object is rendered under.
    #[arg(long)]
    envs: Option<usize>,
    /// Square image resolution.
    #[arg(long)]
    res: Option<usize>,
    /// Environment map height (width is twice this).
    #[arg(long)]
    env_height: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Anti-aliasing samples per pixel.
    #[arg(long)]
    spp: Option<usize>,
}

pub fn run(args: Args) -> Result<()> {
    let mut r = Resolver::new(args.config.as_deref())?;
    let out = r.required_path("out", args.out)?;
    let objects = r.parse_or("objects", args.objects, 8)?;
    let views = r.parse_or("views", args.views, 8)?;
    let envs = r.parse_or("envs", args.envs, 8)?;
    let res = r.parse_or("res", args.res, 64)?;
    let env_height = r.parse_or("env_height", args.env_height, 32)?;
    let seed = r.parse_or("seed", args.seed, 0u64)?;
    let spp = r.parse_or("spp", args.spp, 1)?;
    let resolved = r.finish()?;

    let mut dc = DatasetConfig::new(objects, views, envs, res, seed);
    dc.env_height = env_height;
    dc.spp = spp;
    let meta = render_dataset(&dc, &out)?;
    preview::preview_tree(&out)?;
    resolved.write(&out.join("gen-data.cfg"))?;
    println!(
        "wrote {} objects x {} envs x {} views at {res}x{res} to {}",
        meta.objects.len(),
        envs,
        views,
        out.display()
    );
    Ok(())
}
