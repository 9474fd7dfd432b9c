//! The `surge` command line: synthetic data, graph construction,
//! preprocessing, training, forecasting, correction and evaluation.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use surge_core::geo_graph::{DEFAULT_D_MAX_KM, DEFAULT_RHO_MIN};
use surge_core::ingest::Role;

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use error::{CliError, CliResult, ExitKind};

#[derive(Debug, Parser)]
#[command(
    name = "surge",
    version,
    about = "Graph-based storm-surge offset forecasting and water-level correction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset tree with known offsets.
    Synth(SynthArgs),
    /// Build the station graph from observed-level correlation and distance.
    BuildGraph(BuildGraphArgs),
    /// Compute, clean and scale offsets; fix the window lengths.
    Prepare(PrepareArgs),
    /// Train a model and write last/best checkpoints.
    Train(TrainArgs),
    /// Forecast offsets for every window of a split.
    Predict(PredictArgs),
    /// Apply forecast offsets at one lead to the modeled water levels.
    Correct(CorrectArgs),
    /// Score forecasts against observations.
    Evaluate(EvaluateArgs),
    /// Train every component subset on the same data and compare test RMSE.
    Ablate(AblateArgs),
    /// Train one model per (W_in, W_out) pair and rank them by validation RMSE.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Stations along a coastline with tides, surge pulses and AR(1) bias.
    Coastline,
    /// Two correlated three-station clusters with a known edge set.
    TwoClusters,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synthetic dataset description.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    /// Built-in dataset description.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Station count for the coastline preset.
    #[arg(long, default_value_t = 8)]
    pub stations: usize,
    /// Hours per storm for presets.
    #[arg(long, default_value_t = 1000)]
    pub length_h: usize,
    /// Overrides the seed of the spec file or preset.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory with `<storm>/<node>.csv` series.
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset manifest (default: `<data>/manifest.json`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl DataArgs {
    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.data.join("manifest.json"))
    }
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Station table (default: `<data>/stations.csv`).
    #[arg(long)]
    pub stations: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RHO_MIN)]
    pub rho_min: f64,
    /// Maximum great-circle distance, km.
    #[arg(long, default_value_t = DEFAULT_D_MAX_KM)]
    pub d_max: f64,
    /// Output graph file.
    #[arg(long)]
    pub out: PathBuf,
    /// Correlation thresholds for a threshold sweep table.
    #[arg(long, value_delimiter = ',')]
    pub sweep_rho: Vec<f64>,
    /// Distance thresholds for a threshold sweep table.
    #[arg(long, value_delimiter = ',')]
    pub sweep_d: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Input window in hours (default: from the manifest).
    #[arg(long)]
    pub w_in: Option<usize>,
    /// Prediction window in hours (default: from the manifest).
    #[arg(long)]
    pub w_out: Option<usize>,
    /// Stations missing more than this share of a training storm are dropped.
    #[arg(long, default_value_t = 0.2)]
    pub max_missing: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelInputs {
    /// `prepared.json` written by `prepare`.
    #[arg(long)]
    pub prepared: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    /// TOML file with optional `[model]` and `[train]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Threads per batch for gradient computation.
    #[arg(long)]
    pub shards: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Component subset, e.g. `full` or `GCN+GAT+LSTM`.
    #[arg(long)]
    pub variant: Option<String>,
    /// Continue from `<out>/checkpoint_last.json`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl From<Split> for Role {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => Role::Train,
            Split::Val => Role::Val,
            Split::Test => Role::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `predictions.csv` written by `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Forecast lead in hours (default: the longest available).
    #[arg(long)]
    pub lead: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Lead used for per-station improvement and flood events (default: the longest).
    #[arg(long)]
    pub lead: Option<usize>,
    /// JSON flood thresholds (default minor/moderate/major levels otherwise).
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long, value_delimiter = ',', required = true)]
    pub w_in: Vec<usize>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub w_out: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                ExitKind::BadInput as i32
            } else {
                0
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

/// Keeps freed memory in the process instead of returning it to the OS
/// after every training step; repeated page faults otherwise dominate.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters.
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, 512 << 20);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
    }
}
