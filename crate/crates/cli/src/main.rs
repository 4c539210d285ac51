//! `dagconv`: topology metrics, NNGP eigenvalue bounds, filtering and
//! training simulations for neural-architecture cells.
//!
//! Tables go to stdout as TSV with `#` comment lines echoing the
//! configuration. Summaries and errors go to stderr as `key=value` lines.
//! Exit status: 0 success (row-level errors allowed), 2 configuration error,
//! 3 input error, 4 internal invariant violation.

mod commands;
mod error;
mod input;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "dagconv",
    version,
    about = "Convergence analysis of neural-architecture cells"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-architecture path counts, effective depth/width and λ bounds.
    Analyze(AnalyzeArgs),
    /// Keep architectures whose (d̄, m̄) lie inside the configured region.
    Filter(FilterArgs),
    /// λ bounds over a k0 grid, for a graph or the three reference cells.
    Kernel(KernelArgs),
    /// Multiple correlation of accuracy on (d̄, m̄) from a benchmark CSV.
    Correlate(CorrelateArgs),
    /// Train networks shaped like cells and rank them by convergence speed.
    Simulate(SimulateArgs),
    /// Metric ranges and the derived filter config of an architecture space.
    SpaceStats(SpaceStatsArgs),
}

#[derive(Debug, Args)]
pub struct IoArgs {
    /// Input file, one architecture per line (NB-201 string or `@file.toml`);
    /// `-` or absent reads stdin.
    pub input: Option<PathBuf>,
    /// Write the table here instead of stdout.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Compute rows on all cores; output order is unchanged.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// Input correlation used for the λ columns, in [0, 1).
    #[arg(long, default_value_t = 0.5)]
    pub k0: f64,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub io: IoArgs,
    /// Derive center and radii from the input itself (buffers the input).
    #[arg(long)]
    pub auto: bool,
    /// `key=value` file with center_depth, center_width, radius_depth,
    /// radius_width and optionally keep_fraction.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub center_depth: Option<f64>,
    #[arg(long)]
    pub center_width: Option<f64>,
    #[arg(long)]
    pub radius_depth: Option<f64>,
    #[arg(long)]
    pub radius_width: Option<f64>,
    /// Fraction of each radius accepted around the center (default 0.5).
    #[arg(long)]
    pub keep_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DagSet {
    /// The sequential, parallel and mixed reference cells.
    Builtin3,
}

#[derive(Debug, Args)]
pub struct KernelArgs {
    /// Compare a built-in set of cells.
    #[arg(long, value_enum, conflicts_with_all = ["graph", "arch"])]
    pub dags: Option<DagSet>,
    /// TOML graph file.
    #[arg(long, conflicts_with = "arch")]
    pub graph: Option<PathBuf>,
    /// NB-201 architecture string.
    #[arg(long)]
    pub arch: Option<String>,
    /// Single input correlation.
    #[arg(long, conflicts_with = "grid")]
    pub k0: Option<f64>,
    /// `start:end:count`, inclusive of both ends.
    #[arg(long)]
    pub grid: Option<String>,
    /// Input Gram matrix file (N, then N rows). With a graph, prints the
    /// output kernel; alone, bounds the matrix itself.
    #[arg(long, conflicts_with_all = ["dags", "k0", "grid"])]
    pub matrix: Option<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PerRecord,
    BinMean,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    /// CSV with `arch,accuracy` or `arch,d,m,accuracy` columns.
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::PerRecord)]
    pub mode: ModeArg,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Include the three reference cells.
    #[arg(long)]
    pub builtin3: bool,
    /// TOML graph file; repeatable.
    #[arg(long)]
    pub graph: Vec<PathBuf>,
    /// NB-201 architecture string; repeatable.
    #[arg(long)]
    pub arch: Vec<String>,
    /// Number of seeds per graph, starting at --seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// Base seed for data and initialization.
    #[arg(long, env = "DAGCONV_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum, default_value_t = LossArg::Mse)]
    pub loss: LossArg,
    /// Training accuracy that counts as converged.
    #[arg(long, default_value_t = dagconv::sim::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// CSV of `label,feat0,feat1,...` rows instead of synthetic blobs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write one `epoch,loss,accuracy` CSV per run into this directory.
    #[arg(long)]
    pub trace_dir: Option<PathBuf>,
    /// Use plain ReLU edge outputs without random output signs.
    #[arg(long)]
    pub no_sign_mixing: bool,
    /// Run (graph, seed) pairs on all cores; results are identical.
    #[arg(long)]
    pub parallel: bool,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpaceStatsArgs {
    /// Enumerate the NAS-Bench-201 cell space instead of reading input.
    #[arg(long)]
    pub nb201: bool,
    /// Only count architectures with exactly this many parameterized edges.
    #[arg(long)]
    pub convs: Option<usize>,
    /// Also write the derived filter config in `key=value` form.
    #[arg(long)]
    pub config_out: Option<PathBuf>,
    #[command(flatten)]
    pub io: IoArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Filter(a) => commands::filter(a),
        Command::Kernel(a) => commands::kernel(a),
        Command::Correlate(a) => commands::correlate(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::SpaceStats(a) => commands::space_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    if e.code == "BrokenPipe" {
        return ExitCode::SUCCESS;
    }
    eprintln!("code={}", e.code);
    eprintln!("error={}", e.message);
    e.exit_code()
}
