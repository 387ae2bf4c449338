//! `relit`: desk-scale material-guided relighting experiments end to end —
//! dataset synthesis, staged diffusion training, shuffled multi-view
//! relighting, metrics, and the conditioning ablation.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 data error,
//! 4 numeric error.

mod ablate;
mod config;
mod eval;
mod gen_data;
mod preview;
mod relight;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relit_core::CoreError;

#[derive(Parser)]
#[command(name = "relit", version, about = "Material-guided multi-view relighting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural PBR dataset.
    GenData(gen_data::Args),
    /// Staged diffusion training (single -> multi -> upscale).
    Train(train::Args),
    /// Relight source views under a new environment map.
    Relight(relight::Args),
    /// Score a checkpoint's relights against ground truth (SLR/ILR).
    Eval(eval::Args),
    /// Train the ablation grid and report the variant ordering.
    Ablate(ablate::Args),
}

fn exit_code(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_) => 2,
        CoreError::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and succeed; real usage
            // errors go to stderr with the usage exit code.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(args) => gen_data::run(args),
        Command::Train(args) => train::run(args),
        Command::Relight(args) => relight::run(args),
        Command::Eval(args) => eval::run(args),
        Command::Ablate(args) => ablate::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
