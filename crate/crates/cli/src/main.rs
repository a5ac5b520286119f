mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "fairmdp", version, about = "Fairness-constrained policies for Markov decision processes")]
struct Cli {
    /// Root seed; every command is reproducible given its inputs and seed.
    #[arg(long, global = true, env = "FAIRMDP_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the fairness-constrained LP for an MDP file.
    Solve(SolveArgs),
    /// Run cross-entropy training and print the per-iteration trace.
    Train(TrainArgs),
    /// Train and evaluate policies on the loan environment.
    LoanExperiment(LoanArgs),
    /// Explore-then-commit under unknown transitions.
    EtcExperiment(EtcArgs),
    /// Stationary distribution and mixing time of a Markov chain.
    Mix(MixArgs),
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    /// Fairness tolerance.
    #[arg(long, default_value_t = 0.0)]
    pub tolerance: f64,
    /// Comma-separated qualified states; switches to equal opportunity.
    #[arg(long, value_delimiter = ',')]
    pub qualified: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// MDP document (JSON).
    pub mdp: PathBuf,
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Solve over state-wise fair policies instead.
    #[arg(long)]
    pub conservative: bool,
    /// Use the occupancy-weighted conservative constraint.
    #[arg(long, requires = "conservative")]
    pub occupancy_rows: bool,
    /// Also write the policy as CSV to this file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Variant {
    Cce,
    Optimistic,
    Conservative,
    RaceBlind,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub elite: Option<usize>,
    /// Rollouts per estimate.
    #[arg(long)]
    pub rollouts: Option<usize>,
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Weight elites by raw reward in both phases.
    #[arg(long)]
    pub raw_weights: bool,
    /// Policy score multiplier.
    #[arg(long)]
    pub scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// MDP document; omit to train on the loan environment.
    #[arg(long, conflicts_with = "params")]
    pub mdp: Option<PathBuf>,
    /// Loan parameters (defaults to the shipped values).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Loan fairness criterion.
    #[arg(long, default_value = "dp")]
    pub criterion: fairmdp::loan::LoanCriterion,
    /// Fairness tolerance; unconstrained when omitted.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, value_enum, default_value_t = Variant::Cce)]
    pub variant: Variant,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Args)]
pub struct LoanArgs {
    /// Loan parameters (defaults to the shipped values).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Methods: rb, dp, eo, opt-dp, opt-eo, cons.
    #[arg(long, value_delimiter = ',', default_value = "rb,dp,opt-dp,cons")]
    pub method: Vec<String>,
    /// Criterion the unconstrained methods are measured under.
    #[arg(long, default_value = "dp")]
    pub criterion: fairmdp::loan::LoanCriterion,
    /// Seeds per method.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Evaluation episodes per batch.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// Evaluate the final search mean instead of a draw.
    #[arg(long)]
    pub use_mean: bool,
    /// Emit one row per (method, seed) instead of per method.
    #[arg(long)]
    pub cells: bool,
    /// Append a wall-clock column (breaks byte reproducibility).
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Args)]
pub struct EtcArgs {
    /// Episodic MDP document.
    pub mdp: PathBuf,
    /// Exploration policy as a JSON array of rows (uniform by default).
    #[arg(long)]
    pub pi0: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub horizon: usize,
    /// Total episodes.
    #[arg(long, default_value_t = 10_000)]
    pub episodes: usize,
    /// Exploration episodes; `scale · N^(2/3)` by default.
    #[arg(long)]
    pub exploration: Option<usize>,
    /// Tolerance; `N^(-2/3)` by default.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, default_value_t = 2.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    /// Required occupancy floor of the exploration policy.
    #[arg(long, default_value_t = 0.01)]
    pub floor: f64,
    /// Comma-separated episode counts; prints a regret curve instead.
    #[arg(long, value_delimiter = ',')]
    pub curve: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct MixArgs {
    /// Chain document: `{"transition": [[...]], "eps0": ...}`.
    pub chain: PathBuf,
    /// Overrides the document's `eps0`.
    #[arg(long)]
    pub eps0: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let mut out = std::io::stdout().lock();
    let result = match &cli.command {
        Command::Solve(a) => commands::solve(a, &mut out),
        Command::Train(a) => commands::train(a, cli.seed, &mut out),
        Command::LoanExperiment(a) => commands::loan_experiment(a, cli.seed, &mut out),
        Command::EtcExperiment(a) => commands::etc(a, cli.seed, &mut out),
        Command::Mix(a) => commands::mix(a, &mut out),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
