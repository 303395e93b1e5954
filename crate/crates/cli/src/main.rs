use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use priorba::eval_io::{cli_run, export_sequence, load_sequence, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(name = "priorba", version, about = "Depth-prior-guided visual odometry experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write trajectory, metrics and diagnostics.
    Run {
        config: PathBuf,
        /// Overrides `pipeline.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write the config's sequence (images, depth, camera, ground truth) to a directory.
    ExportSequence { config: PathBuf, dir: PathBuf },
}

fn export(config: &Path, dir: &Path) -> Result<(), ExperimentError> {
    let config = ExperimentConfig::load(config).map_err(ExperimentError::Config)?;
    let seq = load_sequence(&config.sequence).map_err(ExperimentError::Config)?;
    export_sequence(&seq, dir).map_err(ExperimentError::Run)?;
    log::info!("wrote {} frames to {}", seq.len(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, seed, output } => cli_run(&config, seed, output.as_deref()),
        Command::ExportSequence { config, dir } => match export(&config, &dir) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    };
    ExitCode::from(code as u8)
}
