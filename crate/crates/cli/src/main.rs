//! `mdshare`: plan, train, evaluate and sweep multi-domain sharing models.

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "mdshare", version, about = "Filter-level parameter sharing across image domains")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a sharing plan and print its accounting summary.
    Plan(PlanArgs),
    /// Train one multi-domain model and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation splits.
    Eval(EvalArgs),
    /// Run an experiment matrix and write results, report and manifest.
    Matrix(MatrixArgs),
    /// Regenerate the report from a stored results table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Built-in architecture name or architecture file.
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub strategy: mdshare::Strategy,
    #[arg(long)]
    pub fraction: f64,
    /// Seed of the random strategy.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Plan file to write.
    #[arg(long, default_value = "plan.toml")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a configuration entry, e.g. `--set trainer.rounds=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Architecture to train; defaults to the first configured one.
    #[arg(long)]
    pub arch: Option<String>,
    /// Strategy; defaults to the first configured one.
    #[arg(long)]
    pub strategy: Option<mdshare::Strategy>,
    /// Fraction; defaults to the first configured one.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Plan seed; defaults to the first configured one.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also write the accuracies to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results table written by `matrix`.
    #[arg(long)]
    pub results: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Failure::VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match &cli.command {
        Command::Plan(a) => commands::plan(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Matrix(a) => commands::matrix(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
