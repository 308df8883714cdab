//! Experiment driver for the `aoi-nest` scheduler: config loading,
//! subcommands and CSV/JSON artifacts.

pub mod commands;
pub mod config;
pub mod output;
pub mod verify;

use std::path::PathBuf;

use aoi_nest::fluid::DualMethod;
use aoi_nest::index::IndexSource;
use aoi_nest::model::Mode;
use aoi_nest::policy::PolicyKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Bundled base configuration: 50 users, six servers.
pub const PAPER_BASE: &str = include_str!("../configs/paper_base.json");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config schema error: {0}")]
    Schema(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] aoi_nest::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0} check(s) failed")]
    Failed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "aoi-nest", version, about = "Nested index scheduling experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one policy and write trace.csv and summary.csv.
    Simulate(SimulateArgs),
    /// Solve the per-user subproblems at fixed costs.
    Solve(SolveArgs),
    /// Tabulate indices of every state and server.
    IndexTable(IndexTableArgs),
    /// Relaxed lower bound and optimal costs by dual ascent.
    FluidLb(FluidLbArgs),
    /// Run policies over several system scales.
    SweepScale(SweepArgs),
    /// Regenerate one of the published tables or figures.
    Reproduce(ReproduceArgs),
    /// Run the property suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON config, or an artifact with a `# config:` header. Defaults to the bundled base config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub a_max: Option<u32>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "nested", value_parser = parse_policy)]
    pub policy: PolicyKind,
    /// System scale: every user and server group is replicated r times.
    #[arg(long, default_value_t = 1)]
    pub r: usize,
    /// Horizon in slots; the config's horizon by default.
    #[arg(long = "T")]
    pub horizon: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "closed-form", value_parser = parse_index_source)]
    pub index_source: IndexSource,
    /// Also solve the relaxed dual and fill the gap_vs_lb column.
    #[arg(long)]
    pub with_lb: bool,
    /// Write every k-th slot to trace.csv.
    #[arg(long, default_value_t = 1)]
    pub trace_stride: u64,
    /// Rerun exactly the run recorded in an artifact header; other run flags are ignored.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Costs per server type; the config's costs by default.
    #[arg(long, value_delimiter = ',')]
    pub nu: Option<Vec<f64>>,
    /// Only this user group.
    #[arg(long)]
    pub group: Option<usize>,
    /// Directory for per-group value tables (CSV).
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// JSON summary file; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct IndexTableArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',')]
    pub nu: Option<Vec<f64>>,
    #[arg(long, default_value = "closed-form", value_parser = parse_index_source)]
    pub index_source: IndexSource,
    /// CSV file; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FluidLbArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value = "cutting-plane", value_parser = parse_method)]
    pub method: DualMethod,
    #[arg(long, default_value_t = 200)]
    pub max_rounds: usize,
    /// Relative gap at which the search stops.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// JSON file; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub r: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "nested", value_parser = parse_policy)]
    pub policies: Vec<PolicyKind>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    #[arg(long = "T")]
    pub horizon: Option<u64>,
    #[arg(long, default_value = "closed-form", value_parser = parse_index_source)]
    pub index_source: IndexSource,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Table1,
    Table2,
    Fig3,
    Fig4,
    Fig5,
}

#[derive(Debug, Clone, Args)]
pub struct ReproduceArgs {
    pub target: Target,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Scale(s); 20 by default, `1,2,4,8,20` for fig5.
    #[arg(long, value_delimiter = ',')]
    pub r: Option<Vec<usize>>,
    #[arg(long = "T")]
    pub horizon: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    /// Randomized configs per structural check.
    #[arg(long, default_value_t = 20)]
    pub configs: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// JSON report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn valid_names<T: Copy>(all: &[T], name: impl Fn(T) -> &'static str) -> String {
    all.iter().map(|&x| name(x)).collect::<Vec<_>>().join(", ")
}

pub fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse()
        .map_err(|_| format!("unknown policy `{s}`; valid policies: {}", valid_names(&PolicyKind::ALL, PolicyKind::name)))
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|_| format!("unknown mode `{s}`; valid modes: preemptive, nonpreemptive"))
}

fn parse_index_source(s: &str) -> Result<IndexSource, String> {
    s.parse().map_err(|_| format!("unknown index source `{s}`; valid: closed-form, critical-cost, passive"))
}

fn parse_method(s: &str) -> Result<DualMethod, String> {
    s.parse().map_err(|_| format!("unknown method `{s}`; valid: cutting-plane, subgradient"))
}

/// Builds the global thread pool, capped by `AOI_NEST_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("AOI_NEST_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("AOI_NEST_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Io(e.to_string()))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::Solve(a) => commands::solve(&a),
        Command::IndexTable(a) => commands::index_table(&a),
        Command::FluidLb(a) => commands::fluid_lb(&a),
        Command::SweepScale(a) => commands::sweep(&a),
        Command::Reproduce(a) => commands::reproduce(&a),
        Command::Verify(a) => commands::verify(&a),
    }
}
