//! `aspdnet`: ground truth, synthetic data, training, evaluation, prediction
//! and ablation from one binary.
//!
//! Exit status: 0 success, 1 invalid input or configuration, 2 non-finite
//! values during computation, 3 some images failed.

mod commands;
mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Outcome;

#[derive(Parser)]
#[command(name = "aspdnet", version, about = "Density-map object counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Dataset manifest (JSON array of annotation records with "split").
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory; created if missing and locked for the run.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file merged over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value`, value parsed as JSON (else taken as a string).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Gaussian density maps for every image of a manifest.
    GenGt {
        #[command(flatten)]
        shared: Shared,
        /// Also write 16-bit PNG previews.
        #[arg(long)]
        png: bool,
    },
    /// A synthetic dataset with a train/test manifest.
    Synth {
        #[command(flatten)]
        shared: Shared,
    },
    /// Writes the 18 training patches of each training image.
    Augment {
        #[command(flatten)]
        shared: Shared,
        /// Only the first N training images.
        #[arg(long)]
        limit: Option<usize>,
    },
    Train {
        #[command(flatten)]
        shared: Shared,
        /// Continue from the newest epoch checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// MAE/RMSE on the test split.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to model_config.json beside the checkpoint.
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
    /// Density map and count for one image.
    Predict {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
    /// Trains and evaluates the four ablation variants.
    Ablate {
        #[command(flatten)]
        shared: Shared,
    },
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let (name, shared) = match &cli.command {
        Command::GenGt { shared, .. } => ("gen-gt", shared),
        Command::Synth { shared } => ("synth", shared),
        Command::Augment { shared, .. } => ("augment", shared),
        Command::Train { shared, .. } => ("train", shared),
        Command::Eval { shared, .. } => ("eval", shared),
        Command::Predict { shared, .. } => ("predict", shared),
        Command::Ablate { shared } => ("ablate", shared),
    };
    let cfg = config::resolve(shared.config.as_deref(), &shared.overrides, shared.seed)?;
    let mut r = rundir::Run::open(&shared.out, name, &cfg)?;
    let m = &shared.manifest;
    match &cli.command {
        Command::GenGt { png, .. } => commands::gen_gt(&mut r, &cfg, m, *png),
        Command::Synth { .. } => commands::synth(&mut r, &cfg),
        Command::Augment { limit, .. } => commands::augment(&mut r, &cfg, m, *limit),
        Command::Train { resume, .. } => commands::train(&mut r, &cfg, m, *resume),
        Command::Eval { checkpoint, model_config, .. } => {
            commands::eval(&mut r, &cfg, m, checkpoint, model_config.as_deref())
        }
        Command::Predict { image, checkpoint, model_config, .. } => {
            commands::predict(&mut r, &cfg, image, checkpoint, model_config.as_deref())
        }
        Command::Ablate { .. } => commands::ablate(&mut r, &cfg, m),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<aspdnet::Error>()) {
        Some(aspdnet::Error::NonFinite(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(n)) => {
            eprintln!("warning: {n} image(s) failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
