use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use extremal_deform::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "exdeform", version, about = "Spatial deformation and pairwise fitting for extremal dependence")]
pub struct Cli {
    /// JSON configuration; a block keyed by the subcommand name is used when present.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Master seed, overriding any seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a process on a regular grid.
    Simulate(SimulateArgs),
    /// Fit a thin-plate-spline deformation.
    Deform(DeformArgs),
    /// Fit BR/IBR models by censored pairwise likelihood.
    Fit(FitArgs),
    /// Triple-wise χ and conditional-extremes diagnostics.
    Diagnose(DiagnoseArgs),
    /// Repeated simulate/deform/fit study ranked by CLAIC.
    Study(StudyArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    NsBr,
    NsIbr,
    MaxMixture,
    InvertedMaxMixture,
    GaussianMixture,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Built-in process used when no configuration is given.
    #[arg(long, value_enum, default_value = "ns-br")]
    pub preset: Preset,
    #[arg(long)]
    pub n_obs: Option<usize>,
    /// Also write one realisation on an n×n grid.
    #[arg(long)]
    pub render: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Observations CSV (header = site ids).
    #[arg(long)]
    pub obs: PathBuf,
    /// G-plane sites CSV (id,x,y).
    #[arg(long)]
    pub sites: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodArg {
    ChiBr,
    ChiIbr,
    CorrFrob,
    SmithGauss,
}

#[derive(Args, Debug)]
pub struct DeformArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub m0: Option<usize>,
    #[arg(long)]
    pub m_star: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamilyArg {
    Br,
    Ibr,
    Both,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// D-plane sites CSV; when given, every family is fitted on both planes.
    #[arg(long)]
    pub d_sites: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    pub family: FamilyArg,
    #[arg(long, default_value_t = 0.9)]
    pub u_quantile: f64,
    #[arg(long, default_value_t = 1)]
    pub block_b: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransectArg {
    EastWest,
    NorthSouth,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fit report JSON written by `fit`; the lowest-CLAIC entry is used.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub d_sites: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "east-west")]
    pub transect: TransectArg,
    #[arg(long, default_value_t = 30)]
    pub n_triples: usize,
    /// Mean bootstrap block length.
    #[arg(long = "block-mean", short = 'K', default_value_t = 14.0)]
    pub block_mean: f64,
    #[arg(long, default_value_t = 1000)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 0.98)]
    pub q: f64,
    #[arg(long, default_value_t = 100_000)]
    pub mc_samples: usize,
    /// Conditioning quantile for the conditional-extremes fits.
    #[arg(long, default_value_t = 0.9)]
    pub u_quantile: f64,
    /// Exponential-scale level at which conditional expectations are reported.
    #[arg(long)]
    pub u_eval: Option<f64>,
}

#[derive(Args, Debug)]
pub struct StudyArgs {
    /// Built-in process used when no configuration is given.
    #[arg(long, value_enum, default_value = "ns-br")]
    pub preset: Preset,
    #[arg(long)]
    pub repetitions: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
