use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffinfo::cli_io::{run, Command, RunOptions};

/// Information estimates from denoisers: densities, mutual information,
/// per-dimension maps, rankings and flow interventions.
#[derive(Parser)]
#[command(name = "diffinfo", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Report information in bits instead of nats.
    #[arg(long, global = true)]
    bits: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// NLL, MI, CMI or pointwise information over a dataset.
    Estimate,
    /// Per-dimension information maps, optional PGM heatmaps and segmentation.
    Decompose,
    /// Condition ranking accuracy.
    Rank,
    /// Label-omission edits along the flow and their correlation with CMI.
    Intervene,
    /// Train an MLP denoiser and write a checkpoint.
    Train,
    /// Closed-form and quadrature reference values.
    Oracle,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = cli.config else {
        eprintln!("error: --config <path> is required");
        return ExitCode::from(2);
    };
    let command = match cli.command {
        Cmd::Estimate => Command::Estimate,
        Cmd::Decompose => Command::Decompose,
        Cmd::Rank => Command::Rank,
        Cmd::Intervene => Command::Intervene,
        Cmd::Train => Command::Train,
        Cmd::Oracle => Command::Oracle,
    };
    let opts = RunOptions {
        config,
        seed: cli.seed,
        out: cli.out,
        bits: cli.bits,
    };
    match run(command, &opts) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
