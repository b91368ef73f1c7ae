//! `maco`: generate instances, train policies, evaluate methods, verify
//! traces, and render result tables.
//!
//! Exit codes: 0 success, 1 usage or bad input, 2 verification failure,
//! 3 internal error. Thread count follows `MACO_THREADS` when set.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maco::env::EnvKind;
use maco::mdp::PriorityKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{0}")]
    Internal(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Internal(_) | CliError::Io(_) => 3,
        }
    }
}

impl From<maco::io::IoError> for CliError {
    fn from(e: maco::io::IoError) -> Self {
        match e {
            maco::io::IoError::Io(io) => CliError::Io(io),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<maco::trainer::TrainError> for CliError {
    fn from(e: maco::trainer::TrainError) -> Self {
        match e {
            maco::trainer::TrainError::Config(msg) => CliError::Usage(msg),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<maco::mdp::RolloutError> for CliError {
    fn from(e: maco::mdp::RolloutError) -> Self {
        CliError::Internal(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "maco", version, about = "Multi-agent combinatorial optimization workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a JSON-lines dataset plus a manifest recording how it was drawn.
    Generate(GenerateArgs),
    /// Train a policy from a JSON config; artifacts land in the output directory.
    Train(TrainArgs),
    /// Roll out a method over a dataset and write an evaluation report.
    Eval(EvalArgs),
    /// Check a trace against its instance, constraint by constraint.
    Verify(VerifyArgs),
    /// Merge evaluation reports into one table with per-group gaps.
    Table(TableArgs),
    /// Solve small instances exactly and report oracle objectives.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Environment: hcvrp, omdcpdp, or ffsp.
    #[arg(long)]
    env: EnvKind,
    /// Customers (hcvrp), pickup-delivery pairs (omdcpdp), or jobs (ffsp).
    #[arg(long)]
    n: usize,
    /// Vehicles, or machines per stage for ffsp.
    #[arg(long)]
    m: usize,
    /// Stage count; ffsp only.
    #[arg(long, default_value_t = 3)]
    stages: usize,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset path; the manifest lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON; see --print-default for the schema.
    #[arg(long, required_unless_present = "print_default")]
    config: Option<PathBuf>,
    /// Output directory for checkpoint.json, metrics.csv, heldout.csv.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Print the default config for --env and exit.
    #[arg(long)]
    print_default: bool,
    #[arg(long)]
    env: Option<EnvKind>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    /// Attention policy from --checkpoint.
    Policy,
    /// Uniform feasible actions.
    Random,
    /// Nearest feasible target per agent.
    Greedy,
    /// Shortest processing time first; ffsp only.
    Sjf,
}

impl MethodArg {
    fn name(self) -> &'static str {
        match self {
            MethodArg::Policy => "policy",
            MethodArg::Random => "random",
            MethodArg::Greedy => "greedy",
            MethodArg::Sjf => "sjf",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// One deterministic rollout per instance.
    Greedy,
    /// Best of --samples stochastic rollouts.
    Sample,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PriorityArg {
    Learned,
    Random,
    SmallestCost,
    Closest,
}

impl From<PriorityArg> for PriorityKind {
    fn from(p: PriorityArg) -> Self {
        match p {
            PriorityArg::Learned => PriorityKind::Learned,
            PriorityArg::Random => PriorityKind::Random,
            PriorityArg::SmallestCost => PriorityKind::SmallestCost,
            PriorityArg::Closest => PriorityKind::Closest,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// JSON-lines dataset, all instances of one environment.
    #[arg(long)]
    instances: PathBuf,
    /// Required for --method policy.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Policy)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Greedy)]
    mode: ModeArg,
    /// Rollouts per instance in sample mode.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PriorityArg::Learned)]
    priority: PriorityArg,
    /// Report CSV path; wall-times go to a .timing.csv sibling.
    #[arg(long)]
    out: PathBuf,
    /// Also write the best trace per instance into this directory.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    instances: PathBuf,
    /// Line number of the instance within the dataset, starting at 0.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Args)]
struct TableArgs {
    /// Evaluation report CSVs to merge.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// Markdown output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the same table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    instances: PathBuf,
    /// Report CSV path, same schema as eval reports.
    #[arg(long)]
    out: PathBuf,
    /// Reuse solutions across runs keyed by instance content.
    #[arg(long)]
    cache: Option<PathBuf>,
}

fn init_threads() {
    if let Ok(raw) = std::env::var("MACO_THREADS") {
        match raw.parse::<usize>() {
            Ok(threads) if threads > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
            }
            _ => eprintln!("warning: ignoring MACO_THREADS={raw:?} (want a positive integer)"),
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate(args) => commands::generate(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Verify(args) => commands::verify(args),
        Command::Table(args) => commands::table(args),
        Command::Oracle(args) => commands::oracle(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    init_threads();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
