//! `gralora` command-line runner.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Context, Outcome};
use config::{resolve_out_dir, ExperimentConfig, OUT_DIR_ENV};
use gralora_core::Error as CoreError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "gralora", version, about = "LoRA / GraLoRA adapter experiments")]
pub struct Cli {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config file and the environment).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Finite-difference check of analytic gradients for every adapter kind.
    Gradcheck {
        /// Negate analytic gradients before comparison.
        #[arg(long)]
        inject_sign_flip: bool,
    },
    /// Gradient deviation from full fine-tuning across rank, k and seed.
    OutlierSweep,
    /// Effective rank of random adapters per (r, k).
    RankAnalysis,
    /// FLOPs, parameters and activation memory of the configured adapter.
    Cost {
        /// Bytes per activation element.
        #[arg(long, default_value_t = 2)]
        dtype_bytes: u64,
    },
    /// Train the configured adapter on a teacher task.
    Train,
    /// Train hybrid adapters over the ratio axis, with a LoRA baseline.
    HybridSweep,
    /// Check the sparse regularized form against the block grid.
    Equivalence,
}

fn is_config_error(err: &anyhow::Error) -> bool {
    !matches!(
        err.downcast_ref::<CoreError>(),
        Some(CoreError::NonFinite(_) | CoreError::NonFiniteLoss { .. } | CoreError::UndefinedMetric(_))
    )
}

fn resolve(cli: &Cli) -> anyhow::Result<Context> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.jobs == Some(0) {
        anyhow::bail!("--jobs must be at least 1");
    }
    config.validate()?;
    let env = std::env::var(OUT_DIR_ENV).ok();
    let out_dir = resolve_out_dir(cli.out.as_deref(), env.as_deref(), config.output_dir.as_deref());
    Ok(Context {
        config,
        out_dir,
        jobs: cli.jobs,
    })
}

pub fn execute(cli: &Cli) -> u8 {
    let ctx = match resolve(cli) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_CONFIG;
        }
    };
    let result = match &cli.command {
        Command::Gradcheck { inject_sign_flip } => commands::gradcheck(&ctx, *inject_sign_flip),
        Command::OutlierSweep => commands::outlier_sweep(&ctx),
        Command::RankAnalysis => commands::rank_analysis(&ctx),
        Command::Cost { dtype_bytes } => commands::cost(&ctx, *dtype_bytes),
        Command::Train => commands::train(&ctx),
        Command::HybridSweep => commands::hybrid_sweep(&ctx),
        Command::Equivalence => commands::equivalence(&ctx),
    };
    match result {
        Ok(Outcome::Passed) => EXIT_OK,
        Ok(Outcome::Failed(why)) => {
            eprintln!("check failed: {why}");
            EXIT_CHECK_FAILED
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                EXIT_CONFIG
            } else {
                EXIT_CHECK_FAILED
            }
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => ExitCode::from(execute(&cli)),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            ExitCode::from(code)
        }
    }
}
