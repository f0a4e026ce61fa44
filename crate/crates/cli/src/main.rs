mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::DetectOptions;
use config::Overrides;

/// Stealthy attack synthesis, mitigation and detection experiments.
#[derive(Debug, Parser)]
#[command(name = "stealthpath", version)]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rollouts per replanning decision.
    #[arg(long, global = true)]
    rollouts: Option<usize>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Smaller budgets: at most 200 rollouts and 10 runs, or the short validation suite.
    #[arg(long, global = true)]
    quick: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-loop runs of the nominal controller, attacked or not.
    Synth,
    /// Certify the gains and run the saddle-point game.
    Mitigate,
    /// Type-I/type-II trade-off curves of the variance detector.
    Detect(DetectArgs),
    /// Check the estimators against closed forms and a PDE solution.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// Samples per path.
    #[arg(long = "k", value_delimiter = ',', default_values_t = [100, 200, 300])]
    k: Vec<usize>,
    #[arg(long, default_value_t = 1.1)]
    sigma: f64,
    /// Explicit thresholds; replaces the log-spaced grid.
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    tau_count: usize,
    #[arg(long, default_value_t = 1e-3)]
    tau_min: f64,
    #[arg(long, default_value_t = 1e3)]
    tau_max: f64,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Replace the gain identity with a wrong one; the run must fail.
    #[arg(long, hide = true)]
    inject_wrong_gamma: bool,
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Assumption(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Assumption(_) => 3,
            Failure::Numerical(_) => 4,
            Failure::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Assumption(m) => write!(f, "assumption violated: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<stealthpath::Error> for Failure {
    fn from(e: stealthpath::Error) -> Self {
        use stealthpath::Error as E;
        match e {
            E::InvalidArgument(_) => Failure::Config(e.to_string()),
            E::AssumptionViolated { .. } => Failure::Assumption(e.to_string()),
            E::IntegrationDiverged { .. } => Failure::Numerical(e.to_string()),
            E::Io(io) => Failure::Io(io.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("STEALTHPATH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Config(format!("STEALTHPATH_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    let o = Overrides { seed: cli.seed, out: cli.out.clone(), rollouts: cli.rollouts, dt: cli.dt, quick: cli.quick };
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synth => commands::experiment("synth", config, &o),
        Command::Mitigate => commands::experiment("mitigate", config, &o),
        Command::Detect(a) => {
            let out = commands::default_out(&o, config)?;
            let opts = DetectOptions {
                k: a.k,
                sigma: a.sigma,
                taus: a.tau,
                tau_count: a.tau_count,
                tau_min: a.tau_min,
                tau_max: a.tau_max,
            };
            commands::detect(&opts, &out)
        }
        Command::Validate(a) => {
            let cfg = config::ExperimentConfig::load(config, &Overrides { quick: false, ..o.clone() })?;
            commands::validate(cli.quick, cfg.master_seed, a.inject_wrong_gamma, &cfg.output_dir)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stealthpath: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
