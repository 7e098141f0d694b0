mod commands;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ma_core::peak::DEFAULT_HORIZON;
use ma_core::stats::{DEFAULT_THRESHOLD, DEFAULT_TOP_K};

#[derive(Parser, Debug)]
#[command(name = "ma", version, about = "Massive-activation trajectories: stats, fits, peaks and prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Massive-activation verdicts for a stats file, or stats of a MAT1 tensor.
    Stats(StatsArgs),
    /// Per-layer ratio trajectories from a stats file.
    Trajectory(CommonArgs),
    /// Fit every layer trajectory and compare against the step rivals.
    Fit(CommonArgs),
    /// Peak reports in every mode for a fits file.
    Peaks(CommonArgs),
    /// Architecture feature table for every layer in a registry.
    Features(CommonArgs),
    /// Predict fitted parameters from architecture and explain the models.
    Predict(CommonArgs),
    /// Run trajectory, fit, peaks and (with a registry) predict in one go.
    Report(CommonArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Paper,
    Corrected,
    Numeric,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// Input file (stats JSONL, trajectories JSON or fits JSON, depending on the command).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long = "top-k", default_value_t = DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Last training step; decides which peaks fall within training.
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    pub horizon: f64,
    /// Peak mode used for heatmaps and the surface grid.
    #[arg(long, value_enum, default_value_t = ModeArg::Corrected)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Architecture registry: a JSON array of model shapes.
    #[arg(long = "arch-registry")]
    pub arch_registry: Option<PathBuf>,
    /// Write CSV tables only.
    #[arg(long = "no-plots")]
    pub no_plots: bool,
}

#[derive(Args, Debug, Clone)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Metadata attached to stats computed from a MAT1 tensor.
    #[arg(long = "model-id", default_value = "unknown")]
    pub model_id: String,
    #[arg(long, default_value_t = 0)]
    pub step: u64,
    #[arg(long, default_value_t = 1)]
    pub layer: u32,
    #[arg(long = "input-id", default_value = "input0")]
    pub input_id: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MA_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Stats(a) => commands::stats(a),
        Command::Trajectory(a) => commands::trajectory(a),
        Command::Fit(a) => commands::fit(a),
        Command::Peaks(a) => commands::peaks(a),
        Command::Features(a) => commands::features(a),
        Command::Predict(a) => commands::predict(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(commands::Status::Complete) => ExitCode::SUCCESS,
        Ok(commands::Status::Partial(failures)) => {
            eprintln!("{} item(s) failed:", failures.len());
            for f in failures {
                eprintln!("  {f}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
