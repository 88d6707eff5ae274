//! `matchest`: simulate matching markets, estimate the match-value model,
//! impute correction terms, and run second-stage regressions.

mod artifacts;
mod commands;
mod pipeline;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use matchest_core::Error;

const SEED_ENV: &str = "MATCHEST_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "matchest",
    version,
    about = "Two-stage estimation for aligned-preference matching markets"
)]
pub(crate) struct Cli {
    /// Worker threads; results do not depend on this. Defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Log progress at info level (warnings are always shown).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic markets, matchings, outcomes and ground truth.
    Simulate(SimulateArgs),
    /// Compute the stable matching of one market from a utility table.
    Solve(SolveArgs),
    /// Fit the match-value coefficients by simulated maximum likelihood.
    Estimate(EstimateArgs),
    /// Impute the correction term E[ε | μ, X] for every matched pair.
    Impute(ImputeArgs),
    /// Second-stage regression with bootstrap standard errors.
    Regress(RegressArgs),
    /// Run the brute-force reference checks on tiny markets.
    Validate(ValidateArgs),
    /// simulate, estimate, impute and regress end to end, with a summary report.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Clone)]
pub(crate) struct Seed {
    /// Master seed for every random draw.
    #[arg(long, env = SEED_ENV)]
    pub(crate) seed: u64,
}

#[derive(Args, Debug)]
pub(crate) struct SimulateArgs {
    #[command(flatten)]
    pub(crate) seed: Seed,
    /// Generator settings (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub(crate) config: Option<PathBuf>,
    /// Number of markets (overrides the config file).
    #[arg(long)]
    pub(crate) markets: Option<usize>,
    /// Correlation of the selection and outcome shocks (overrides the config file).
    #[arg(long)]
    pub(crate) rho: Option<f64>,
    /// Outcome shock standard deviation (overrides the config file).
    #[arg(long)]
    pub(crate) sigma: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub(crate) out: PathBuf,
    /// Replace existing output files.
    #[arg(long)]
    pub(crate) force: bool,
}

#[derive(Args, Debug)]
pub(crate) struct SolveArgs {
    /// Market document (JSON).
    #[arg(long)]
    pub(crate) market: PathBuf,
    /// CSV with columns accelerator_id,startup_id,utility.
    #[arg(long)]
    pub(crate) utilities: PathBuf,
    /// Write the matching here instead of standard output.
    #[arg(long)]
    pub(crate) out: Option<PathBuf>,
    #[arg(long)]
    pub(crate) force: bool,
}

#[derive(Args, Debug, Clone)]
pub(crate) struct MarketInputs {
    /// Directory of market documents (*.json).
    #[arg(long)]
    pub(crate) markets: PathBuf,
    /// Observed matchings; defaults to matching.json next to the market directory.
    #[arg(long)]
    pub(crate) matching: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub(crate) struct EstimateArgs {
    #[command(flatten)]
    pub(crate) inputs: MarketInputs,
    #[command(flatten)]
    pub(crate) seed: Seed,
    /// Simulation draws per market.
    #[arg(long, default_value_t = matchest_core::likelihood::DEFAULT_DRAWS)]
    pub(crate) draws: usize,
    /// Market-level bootstrap replications (0 or 1 skips standard errors).
    #[arg(long, default_value_t = matchest_core::estimator::DEFAULT_BOOTSTRAP)]
    pub(crate) boot: usize,
    /// Optimizer settings (JSON).
    #[arg(long)]
    pub(crate) optimizer: Option<PathBuf>,
    /// Output fit document.
    #[arg(long)]
    pub(crate) out: PathBuf,
    #[arg(long)]
    pub(crate) force: bool,
}

#[derive(Args, Debug)]
pub(crate) struct ImputeArgs {
    #[command(flatten)]
    pub(crate) inputs: MarketInputs,
    /// First-stage fit document.
    #[arg(long)]
    pub(crate) fit: PathBuf,
    /// Draws per market; defaults to the count used by the fit.
    #[arg(long)]
    pub(crate) draws: Option<usize>,
    /// Draw seed; defaults to the fit's, which reuses its simulation draws.
    #[arg(long)]
    pub(crate) seed: Option<u64>,
    /// Output CSV: market_id,startup_id,accelerator_id,eps_hat,ess.
    #[arg(long)]
    pub(crate) out: PathBuf,
    #[arg(long)]
    pub(crate) force: bool,
}

#[derive(Args, Debug)]
pub(crate) struct RegressArgs {
    /// Regression specification (JSON).
    #[arg(long)]
    pub(crate) spec: PathBuf,
    /// Outcome table (CSV).
    #[arg(long)]
    pub(crate) outcomes: PathBuf,
    /// Correction terms (CSV), required when the spec includes the correction.
    #[arg(long)]
    pub(crate) corrections: Option<PathBuf>,
    /// First-stage fit the corrections came from, recorded in the output.
    #[arg(long)]
    pub(crate) fit: Option<PathBuf>,
    #[command(flatten)]
    pub(crate) seed: Seed,
    /// Bootstrap replications.
    #[arg(long, default_value_t = matchest_core::estimator::DEFAULT_BOOTSTRAP)]
    pub(crate) boot: usize,
    /// Output table (CSV).
    #[arg(long)]
    pub(crate) out: PathBuf,
    #[arg(long)]
    pub(crate) force: bool,
}

#[derive(Args, Debug)]
pub(crate) struct ValidateArgs {
    /// Run the tiny-market suite (the only suite available).
    #[arg(long)]
    pub(crate) tiny: bool,
    #[command(flatten)]
    pub(crate) seed: Seed,
    /// Also write the report here.
    #[arg(long)]
    pub(crate) out: Option<PathBuf>,
    #[arg(long)]
    pub(crate) force: bool,
}

#[derive(Args, Debug)]
pub(crate) struct PipelineArgs {
    #[command(flatten)]
    pub(crate) seed: Seed,
    /// Output directory.
    #[arg(long)]
    pub(crate) out: PathBuf,
    /// Number of synthetic markets.
    #[arg(long, default_value_t = 37)]
    pub(crate) markets: usize,
    /// First-stage simulation draws per market.
    #[arg(long, default_value_t = matchest_core::likelihood::DEFAULT_DRAWS)]
    pub(crate) draws: usize,
    /// First-stage bootstrap replications.
    #[arg(long, default_value_t = matchest_core::estimator::DEFAULT_BOOTSTRAP)]
    pub(crate) boot: usize,
    /// Second-stage bootstrap replications.
    #[arg(long, default_value_t = matchest_core::estimator::DEFAULT_BOOTSTRAP)]
    pub(crate) second_boot: usize,
    #[arg(long, default_value_t = 0.35)]
    pub(crate) rho: f64,
    #[arg(long, default_value_t = 1.0)]
    pub(crate) sigma: f64,
    #[arg(long)]
    pub(crate) force: bool,
}

/// Failures with their exit codes.
#[derive(Debug)]
pub(crate) enum Failure {
    Core(Error),
    /// A validation check did not pass.
    Validation(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) | Failure::Core(Error::InvalidMarket { .. }) => 1,
            Failure::Core(Error::Numeric(_) | Error::Oracle(_)) => 3,
            Failure::Core(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Validation(_) => "validation",
            Failure::Core(e) => match e {
                Error::Config(_) => "config",
                Error::InvalidMarket { .. } => "invalid_market",
                Error::Numeric(_) => "numeric",
                Error::Identification(_) => "identification",
                Error::Collinear(_) => "collinear",
                Error::Oracle(_) => "oracle",
                Error::Io(_) => "io",
                Error::Json(_) => "json",
                Error::Csv(_) => "csv",
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Validation(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

pub(crate) type CliResult<T> = std::result::Result<T, Failure>;

fn run(cli: Cli) -> CliResult<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()).into());
        }
        pool = pool.num_threads(n);
    }
    pool.build_global()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?;

    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Solve(a) => commands::solve(&a),
        Command::Estimate(a) => commands::estimate(&a),
        Command::Impute(a) => commands::impute(&a),
        Command::Regress(a) => commands::regress(&a),
        Command::Validate(a) => validate::run(&a),
        Command::Pipeline(a) => pipeline::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let report = serde_json::json!({
                "error": f.kind(),
                "message": f.message(),
                "exit_code": f.code(),
            });
            eprintln!("{report}");
            ExitCode::from(f.code())
        }
    }
}
