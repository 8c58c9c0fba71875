//! Command-line driver: loads an experiment config, applies flag overrides,
//! and dispatches one run kind into an output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tilesplat_core::harness::ExperimentConfig;
use tilesplat_core::runner::{run_experiment, RunKind, SweepParam};

#[derive(Parser)]
#[command(name = "tilesplat", version, about = "Uncertainty-guided splat reconstruction and tiling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file: flat key = value lines or a JSON object. Defaults apply
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for tables, images, and the run record.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the base seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Active reconstruction; saves the field and ground uncertainty map.
    Reconstruct {
        #[command(flatten)]
        common: Common,
    },
    /// Builds the tile set and a stochastic tiling over it.
    Tiles {
        #[command(flatten)]
        common: Common,
    },
    /// Orbits the tiled region with cached level-of-detail rendering.
    Render {
        #[command(flatten)]
        common: Common,
        /// Frames along the camera path.
        #[arg(long, default_value_t = 120)]
        frames: usize,
        /// Camera path shape; only a closed circle is supported.
        #[arg(long, default_value = "circle")]
        path: String,
    },
    /// Runs every pipeline variant over multiple seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds per variant.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Sweeps one parameter over its grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of: k, pdrop, lambda, tau.
        #[arg(long)]
        param: String,
        /// Seeds per grid value.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Compares active, random, and exhaustive selection across budgets.
    BudgetCurve {
        #[command(flatten)]
        common: Common,
        /// Seeds per arm.
        #[arg(long)]
        seeds: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, String> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            ExperimentConfig::from_text(&text).map_err(|e| e.to_string())?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), String> {
    let (common, kind, sweep_param) = match &cli.command {
        Command::Reconstruct { common } => (common, RunKind::Reconstruct, None),
        Command::Tiles { common } => (common, RunKind::Tiles, None),
        Command::Render { common, .. } => (common, RunKind::Render, None),
        Command::Ablate { common, .. } => (common, RunKind::Ablate, None),
        Command::Sweep { common, param, .. } => {
            let param = SweepParam::parse(param).map_err(|e| e.to_string())?;
            (common, RunKind::Sweep, Some(param))
        }
        Command::BudgetCurve { common, .. } => (common, RunKind::BudgetCurve, None),
    };
    let mut cfg = load_config(common)?;
    match &cli.command {
        Command::Render { frames, path, .. } => {
            if path != "circle" {
                return Err(format!("unsupported camera path {path:?}; expected circle"));
            }
            cfg.frames = *frames;
        }
        Command::Ablate { seeds, .. }
        | Command::Sweep { seeds, .. }
        | Command::BudgetCurve { seeds, .. } => {
            if let Some(s) = *seeds {
                cfg.seeds = s;
            }
        }
        _ => {}
    }
    cfg.validate().map_err(|e| e.to_string())?;

    log::info!("running {} into {}", kind.as_str(), common.out.display());
    run_experiment(&cfg, kind, &common.out, sweep_param).map_err(|e| e.to_string())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
