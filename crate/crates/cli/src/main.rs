//! `stackelgrad`: train generators, poison datasets, and run the experiment suite.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure, 1 anything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "stackelgrad", version, about = "Unlearnable-example poisoning as a leader-follower game")]
struct Cli {
    /// Worker threads for experiment grids.
    #[arg(long, global = true, env = "STACKELGRAD_JOBS")]
    jobs: Option<usize>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Io {
    /// JSON spec file.
    #[arg(long)]
    pub spec: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the game seed and replaces the replicate seeds with this one.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (spec: dataset parameters) as features/labels CSV.
    GenData(Io),
    /// Train a perturbation generator (spec: experiment).
    TrainGen(Io),
    /// Poison a dataset with a trained generator.
    Poison {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clamp poisoned features to `lo,hi`.
        #[arg(long, value_parser = commands::parse_range, allow_hyphen_values = true)]
        clip: Option<(f64, f64)>,
    },
    /// Retrain victims on clean and poisoned data (spec: experiment).
    Eval {
        #[command(flatten)]
        io: Io,
        /// Generator checkpoint; without one both sides are clean.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the experiment tables selected by the spec's scenario.
    Experiment(Io),
    /// Gradient-norm and convergence traces for the CE, clipped-CE and SUR attacker losses.
    Diag(Io),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = commands::Context::new(cli.jobs, cli.quiet);
    let result = match cli.command {
        Command::GenData(io) => commands::gen_data(&ctx, &io),
        Command::TrainGen(io) => commands::train_gen(&ctx, &io),
        Command::Poison { checkpoint, features, labels, out, clip } => {
            commands::poison(&ctx, &checkpoint, &features, &labels, &out, clip)
        }
        Command::Eval { io, checkpoint } => commands::eval(&ctx, &io, checkpoint.as_deref()),
        Command::Experiment(io) => commands::experiment(&ctx, &io),
        Command::Diag(io) => commands::diag(&ctx, &io),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
