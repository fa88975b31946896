use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gxe::{Command, RunConfig};
use gxe_core::neural::Profile;

#[derive(Parser)]
#[command(name = "gxe", version, about = "Genotype-by-environment prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic trial dataset with ground truth
    Simulate(Common),
    /// Filter and impute raw trial, marker and environment tables
    Ingest(Common),
    /// Fit the factor-analytic mixed model and emit labels
    Decompose(Common),
    /// Train the structured network on the labels
    Train(Common),
    /// Predict held-out cells with the trained network
    Predict(Common),
    /// Regression and ranking metrics of a predictions file
    Evaluate(Common),
    /// Selection simulations and gain curves
    Select(Common),
    /// Random hyperparameter search on the tuning fold
    Tune(Common),
    /// Models × folds × replicates, with aggregated metrics
    Experiment(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration
    #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Run directory, overriding the configuration
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GXE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => e.exit(),
    };
    let (cmd, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Ingest(a) => (Command::Ingest, a),
        Cmd::Decompose(a) => (Command::Decompose, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Predict(a) => (Command::Predict, a),
        Cmd::Evaluate(a) => (Command::Evaluate, a),
        Cmd::Select(a) => (Command::Select, a),
        Cmd::Tune(a) => (Command::Tune, a),
        Cmd::Experiment(a) => (Command::Experiment, a),
    };
    let profile = args.profile.map(|p| match p {
        ProfileArg::Desk => Profile::Desk,
        ProfileArg::Paper => Profile::Paper,
    });
    let result = args
        .config
        .as_deref()
        .map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
        .map(|c| c.with_overrides(args.seed, profile, args.out))
        .and_then(|cfg| gxe::run(cmd, &cfg, args.config.as_deref()));
    match result {
        Ok(manifest) => {
            log::info!("manifest written to {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
