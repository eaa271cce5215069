//! `mfwsn`: compile per-node protocol models into mean-field systems and
//! analyse them. Curves, trajectories and grids are written as CSV,
//! listings and fixpoint reports as JSON (see `docs/formats.md`). With
//! `--out`, a `<out>.manifest.json` sidecar records the resolved
//! configuration.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mfwsn::pctmc::QArgument;

/// Exit status for configuration, model and usage errors.
pub const EXIT_CONFIG: u8 = 2;
/// Exit status for numerical failures.
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mfwsn", version, about = "Mean-field analysis of wireless protocol models")]
struct Cli {
    /// Worker threads for grid and replication parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabulate the capture probability q(i) as `i,q`.
    QCurve(QCurveArgs),
    /// Print the generated population model and its ODE system.
    Transform(TransformArgs),
    /// Integrate the mean-field ODEs from an initial occupancy.
    Integrate(IntegrateArgs),
    /// Locate and classify fixpoints reached from several starts.
    Fixpoints(FixpointArgs),
    /// Classify a 2-D grid of initial conditions by the fixpoint they reach.
    Basin(BasinArgs),
    /// Simulate the finite-N chain exactly (jump by jump).
    Simulate(SimulateArgs),
    /// Compare simulations with the ODE solution over several N.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialKind {
    Uniform,
    Lognormal,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct QCurveArgs {
    /// Take the channel from this model file instead of the flags below.
    #[arg(long, conflicts_with_all = ["spatial", "beta", "z", "sigma_d"])]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "uniform")]
    pub spatial: SpatialKind,
    /// Pathloss exponent.
    #[arg(long, default_value_t = 4.0)]
    pub beta: f64,
    /// Capture threshold.
    #[arg(long, default_value_t = 10.0)]
    pub z: f64,
    /// Log-normal shadowing spread (log-normal only).
    #[arg(long = "sigma-d", default_value_t = 2.0)]
    pub sigma_d: f64,
    #[arg(long = "i-max", default_value_t = 10.0)]
    pub i_max: f64,
    /// Number of equally spaced points on [0, i_max].
    #[arg(long = "n-points", default_value_t = 101, value_parser = clap::value_parser!(u64).range(2..))]
    pub n_points: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Model selection shared by the analysis subcommands.
#[derive(Debug, Args, serde::Serialize)]
pub struct ModelArgs {
    /// Model file (JSON). The bundled `aloha3.json` and `discovery6.json`
    /// are found by name when no such file exists.
    pub model: PathBuf,
    /// System size, overriding the model file.
    #[arg(long = "N")]
    pub size: Option<usize>,
    /// Argument of q in broadcast receive rates.
    #[arg(long, default_value = "interference-total", value_parser = parse_convention)]
    pub convention: QArgument,
    /// Replace direct q evaluation by a monotone table with this many points.
    #[arg(long = "q-table")]
    pub q_table: Option<usize>,
}

fn parse_convention(s: &str) -> Result<QArgument, String> {
    s.parse().map_err(|e: mfwsn::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ListingFormat {
    Text,
    Json,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct TransformArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "text")]
    pub format: ListingFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct IntegrateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Initial occupancy `state=frac,...` (default: the model's).
    #[arg(long)]
    pub x0: Option<String>,
    /// Time horizon.
    #[arg(long = "T")]
    pub horizon: f64,
    /// Output stride; every accepted step when omitted.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Relative tolerance of the integrator (absolute is 1e-2 of it).
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct FixpointArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Start point `state=frac,...`; repeatable. Default: every vertex.
    #[arg(long)]
    pub x0: Vec<String>,
    /// Length of the seeding integration.
    #[arg(long = "T", default_value_t = 5000.0)]
    pub horizon: f64,
    /// Residual tolerance ‖f‖∞ for accepting a fixpoint.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct BasinArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Two states spanning the grid, e.g. `O,R`.
    #[arg(long)]
    pub axes: String,
    /// State receiving the remaining occupancy (default: first other state).
    #[arg(long)]
    pub closure: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub resolution: usize,
    /// Integration horizon per cell.
    #[arg(long = "T", default_value_t = 5000.0)]
    pub horizon: f64,
    /// Relative tolerance of the integrator.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Initial occupancy, rounded to the nearest lattice point.
    #[arg(long)]
    pub x0: Option<String>,
    #[arg(long = "T")]
    pub horizon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random stream of the seed; `compare` uses stream k for replication k.
    #[arg(long, default_value_t = 0)]
    pub stream: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated, strictly increasing system sizes.
    #[arg(long = "Ns", value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub x0: Option<String>,
    #[arg(long = "T", default_value_t = 200.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 20)]
    pub replications: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points of the comparison grid on [0, T].
    #[arg(long = "grid-points", default_value_t = 1000)]
    pub grid_points: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::new().parse_filters(level).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let result = match &cli.command {
        Command::QCurve(a) => commands::q_curve(a),
        Command::Transform(a) => commands::transform(a),
        Command::Integrate(a) => commands::integrate(a),
        Command::Fixpoints(a) => commands::fixpoints(a),
        Command::Basin(a) => commands::basin(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Compare(a) => commands::compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
