//! `flowprune` command-line tool: strategy search, evaluation, pruning
//! reports, cost analysis, flow divergence, and patch entropy.

mod commands;
mod config;
mod strategy_file;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "flowprune",
    version,
    about = "Visual-token pruning: calibrated importance, staged pruning with recycling, \
             and flow-guided strategy search on a deterministic toy model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a pruning strategy with the GP-guided optimizer
    Optimize(OptimizeArgs),
    /// Score a strategy on a workload or on recorded trace bundles
    Eval(EvalArgs),
    /// Report retained/pruned/merged position IDs per stage
    Prune(PruneArgs),
    /// Analytic FLOPs and KV-cache savings of a strategy
    Cost(CostArgs),
    /// Per-layer text-token similarity between the full and pruned runs
    Flow(FlowArgs),
    /// Per-patch gray-level entropy of an image
    Entropy(EntropyArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Run-configuration file (`key = value` lines)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the search seed (optimize) or workload seed (eval/flow)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the synthetic workload sample count
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Clone, Copy, Default)]
pub struct AblationFlags {
    /// Score tokens by plain mean received attention instead of the
    /// calibrated key-token score
    #[arg(long)]
    pub no_calibration: bool,
    /// Skip merge-and-recycle at the initial pruning stage
    #[arg(long)]
    pub no_merge: bool,
    /// Replace the staged schedule with a single pre-LM prune to the
    /// budget, keeping the token count constant across layers
    #[arg(long)]
    pub uniform_stages: bool,
}

#[derive(Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Override the target average retention budget
    #[arg(long)]
    pub budget: Option<f64>,
    /// Override the total evaluation count
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Override the initial-design size
    #[arg(long)]
    pub init: Option<usize>,
    /// Output directory for the strategy file and run ledger
    #[arg(long, default_value = "flowprune-out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub ablations: AblationFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Strategy file to score
    pub strategy: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory of recorded trace bundles (or a single bundle)
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub ablations: AblationFlags,
}

#[derive(Args)]
pub struct PruneArgs {
    /// Strategy file to apply
    pub strategy: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Image to prune (P5/P6 portable pixmap)
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Recorded trace bundle to prune
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Write the report here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub ablations: AblationFlags,
}

#[derive(Args)]
pub struct CostArgs {
    /// Strategy file to cost
    pub strategy: PathBuf,
    /// Decoder hidden dimension
    #[arg(long, default_value_t = 3584)]
    pub hidden: usize,
    /// Decoder FFN dimension
    #[arg(long, default_value_t = 18944)]
    pub ffn: usize,
    /// Attention heads
    #[arg(long, default_value_t = 28)]
    pub heads: usize,
    /// KV element size in bytes (2 or 4)
    #[arg(long, default_value_t = 2)]
    pub bytes: usize,
    /// Visual tokens entering the decoder
    #[arg(long, default_value_t = 7290)]
    pub n_visual: usize,
    /// Text tokens accompanying them
    #[arg(long, default_value_t = 60)]
    pub n_text: usize,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FlowArgs {
    /// Strategy file to trace
    pub strategy: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Workload sample index to analyze
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub ablations: AblationFlags,
}

#[derive(Args)]
pub struct EntropyArgs {
    /// Image file (P5/P6 portable pixmap)
    pub image: PathBuf,
    /// Patch side length in pixels
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Optimize(args) => commands::cmd_optimize(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Prune(args) => commands::cmd_prune(args),
        Command::Cost(args) => commands::cmd_cost(args),
        Command::Flow(args) => commands::cmd_flow(args),
        Command::Entropy(args) => {
            commands::cmd_entropy(&args.image, args.patch_size, args.out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}
