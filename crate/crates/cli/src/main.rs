//! `krc` — data generation, training, evaluation, and plotting for the
//! valve-rotation world.
//!
//! Every subcommand takes `--config <path>`, `--seed <u64>`, and `--out
//! <dir>`; runs are deterministic in (config, seed). Exit codes: 0 success,
//! 1 contract/config errors, 2 numeric failures, 64 usage errors.

mod commands;
mod plot;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use krc_core::KrcError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "krc", version, about = "valve-world latent dynamics and visual MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// structured-text configuration file
    #[arg(long)]
    config: PathBuf,
    /// root seed for every derived random stream
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// output directory for artifacts
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a dataset of randomized/canonical episode pairs
    GenData {
        #[command(flatten)]
        common: Common,
        /// override the config's texture randomization interval
        #[arg(long)]
        texture_interval: Option<String>,
    },
    /// Train one model variant on a dataset
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// variant name (KRC_wz, KRC_woz, KR2_wz, KR2_woz, KC2_wz,
        /// KRNc_rand, KRNc_transparent); omitted = raw [train] section
        #[arg(long)]
        variant: Option<String>,
    },
    /// Train the planner ensemble and attach it to a checkpoint
    TrainEnsemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate one checkpoint over randomized test domains
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One closed-loop MPC run with full logging
    Mpc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// occlude every observation
        #[arg(long, default_value_t = false)]
        occlusion: bool,
    },
    /// Success-rate comparison across variants
    Compare {
        #[command(flatten)]
        common: Common,
        /// directory of checkpoints laid out as <variant>/seed<k>.krck
        #[arg(long)]
        models: PathBuf,
    },
    /// Occlusion + perturbed-prior challenge
    Occlusion {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: PathBuf,
    },
    /// Multi-speed task transfer
    SpeedTasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: PathBuf,
    },
    /// Feature-dimension study (timing + estimation error)
    AblateDimA {
        #[command(flatten)]
        common: Common,
    },
    /// Encode a dataset and export features with a 2-D projection
    ExportLatent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Render a CSV artifact as a PNG
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// train-log | latent | compare | speed
        #[arg(long)]
        kind: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if let Ok(threads) = std::env::var("KRC_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }

    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

impl Common {
    fn load(&self) -> Result<krc_core::io::KrcConfig, KrcError> {
        krc_core::io::KrcConfig::load(&self.config)
    }
}
