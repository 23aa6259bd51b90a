//! `sghf` command-line front end.

mod commands;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sghf_core::sghf::Variant;
use sghf_core::Error;

#[derive(Parser)]
#[command(name = "sghf", version, about = "Synthetic-pathology guided CT classifier: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Run configuration (JSON, as written by `sghf init`).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a full configuration template.
    Init {
        /// `desk` or `paper-scale`.
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(short, long, default_value = "config.json")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory; defaults to `<output_dir>/data`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Use the distribution-shifted generator instead.
        #[arg(long)]
        external: bool,
    },
    /// Cross-validated training and testing of one variant.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to the variant in the configuration.
        #[arg(long)]
        variant: Option<Variant>,
        /// Dataset directory; defaults to `<output_dir>/data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory; defaults to `<output_dir>`.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(short, long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-score a run's checkpoints on their test folds.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a run's checkpoints on a distribution-shifted dataset.
    ExternalValidate {
        #[arg(long)]
        run: PathBuf,
        /// Saved external dataset; generated from the run configuration if omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and test every variant on shared folds and write a comparison.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(short, long, default_value_t = 1)]
        jobs: usize,
    },
    /// Comparison table over finished runs.
    Report {
        /// Directories holding `metrics.json` (or a `report/` with one).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write `<out>.md` and `<out>.csv`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::NonFinite { .. } | Error::Invariant(_) => 4,
        Error::Config(_) | Error::Shape(_) | Error::MissingParam(_) | Error::NonScalarLoss(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init { preset, out, seed } => commands::init(&preset, &out, seed),
        Command::GenData { cfg, out, external } => commands::gen_data(&cfg, out, external),
        Command::Train {
            cfg,
            variant,
            data,
            run,
            jobs,
        } => commands::train(&cfg, variant, data, run, jobs),
        Command::Eval { run, data } => commands::eval(&run, &data),
        Command::ExternalValidate { run, data } => commands::external(&run, data),
        Command::Ablate { cfg, data, run, jobs } => commands::ablate(&cfg, data, run, jobs),
        Command::Report { runs, out } => commands::report(&runs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
