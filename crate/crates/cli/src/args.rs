use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "voltstab", version, about = "Voltage-stability monitoring from synthetic PMU data")]
pub struct Cli {
    /// JSON run configuration; command-line flags override its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory for result files.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inspect a case file.
    Case {
        #[command(subcommand)]
        action: CaseCmd,
    },
    /// Solve the base-case power flow.
    Pf {
        #[command(subcommand)]
        action: PfCmd,
    },
    /// Continuation power flow.
    Cpflow {
        #[command(subcommand)]
        action: CpflowCmd,
    },
    /// Training-set generation.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Fit the feature-to-(λ, V) map and store it in a new checkpoint.
    FitAlignment(FitArgs),
    /// Run a measurement stream through a trained model.
    Monitor(MonitorArgs),
    /// Accuracy of the collapse-point estimate.
    Eval {
        #[command(subcommand)]
        action: EvalCmd,
    },
    /// Render columns of a CSV file as an SVG line chart.
    ExportPlot(PlotArgs),
    /// Time per-vector model inference.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct CaseArg {
    /// MATPOWER `.m` or JSON case file.
    #[arg(long)]
    pub case: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CaseCmd {
    Info(CaseArg),
}

#[derive(Debug, Subcommand)]
pub enum PfCmd {
    Run {
        #[command(flatten)]
        case: CaseArg,
        /// Ignore generator reactive limits.
        #[arg(long)]
        no_q_limits: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum CpflowCmd {
    Trace {
        #[command(flatten)]
        case: CaseArg,
        /// Buses whose active demand grows together; λ = 1 adds the case's
        /// total active demand.
        #[arg(long, value_delimiter = ',')]
        bus: Vec<i64>,
        /// JSON file holding a full load direction instead of `--bus`.
        #[arg(long, conflicts_with = "bus")]
        direction: Option<PathBuf>,
        /// Stop at the nose.
        #[arg(long)]
        upper_only: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetCmd {
    Gen {
        #[command(flatten)]
        case: CaseArg,
        #[arg(long)]
        curves: Option<usize>,
        #[arg(long)]
        min_nodes: Option<usize>,
        #[arg(long)]
        max_nodes: Option<usize>,
        /// Preset name or comma-separated bus list.
        #[arg(long)]
        placement: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Encoder widths, ending with twice the latent size.
    #[arg(long, value_delimiter = ',')]
    pub encoder: Vec<usize>,
    /// Decoder widths, ending with the input size.
    #[arg(long, value_delimiter = ',')]
    pub decoder: Vec<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train the deterministic autoencoder baseline instead.
    #[arg(long)]
    pub plain: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub phi: Option<f64>,
    /// Fit without a constant term.
    #[arg(long)]
    pub no_intercept: bool,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Measurement CSV to replay.
    #[arg(long, conflicts_with = "schedule")]
    pub input: Option<PathBuf>,
    /// Load schedule JSON, or `table1` / `table2`, replayed on `--case`.
    #[arg(long)]
    pub schedule: Option<String>,
    #[command(flatten)]
    pub case: CaseArg,
    #[arg(long)]
    pub phi: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    Vcp {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        case: CaseArg,
        /// `sli` or `dli`.
        #[arg(long, default_value = "sli")]
        scenario: String,
        #[arg(long)]
        phi: Option<f64>,
    },
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Column for the horizontal axis.
    #[arg(long, default_value = "t")]
    pub x: String,
    /// Columns to draw; all others by default.
    #[arg(long, value_delimiter = ',')]
    pub y: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub repeats: usize,
}
