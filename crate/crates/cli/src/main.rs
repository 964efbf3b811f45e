use std::path::PathBuf;
use std::process::ExitCode;

use afa_cli::{run, Command, UsageError};
use clap::{Args, Parser, Subcommand};

/// Adaptive feature aggregation of toy diffusion denoisers.
#[derive(Parser)]
#[command(name = "afa", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to paths.out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the training splits and the validation set.
    GenData(Common),
    /// Train one expert per split.
    PretrainExperts(Common),
    /// Train the spatial aggregator over frozen experts.
    TrainAfa(Common),
    /// Train routers for a mixture of experts.
    TrainMoe(Common),
    /// Merge expert parameters statically.
    Merge(Common),
    /// Draw guided DDIM samples as PNG files.
    Sample(Common),
    /// Held-out denoising error of a checkpoint.
    Eval(Common),
    /// Per-region win proportions and capability maps of the experts.
    AnalyzeWins(Common),
    /// Attention heatmaps of an ensemble checkpoint.
    ExportAttn(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, c) = match cli.command {
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::PretrainExperts(c) => (Command::PretrainExperts, c),
        Cmd::TrainAfa(c) => (Command::TrainAfa, c),
        Cmd::TrainMoe(c) => (Command::TrainMoe, c),
        Cmd::Merge(c) => (Command::Merge, c),
        Cmd::Sample(c) => (Command::Sample, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::AnalyzeWins(c) => (Command::AnalyzeWins, c),
        Cmd::ExportAttn(c) => (Command::ExportAttn, c),
    };
    match run(cmd, &c.config, c.seed, c.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
