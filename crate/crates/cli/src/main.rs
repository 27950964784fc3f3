use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use founddiff_cli::commands;
use founddiff_cli::{CliError, Run};

#[derive(Parser)]
#[command(name = "founddiff", version, about = "Dose- and anatomy-aware low-dose CT denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a paired NDCT/LDCT dataset.
    Simulate,
    /// Train the dose/anatomy perception encoder.
    TrainPerception,
    /// Train the residual diffusion denoiser on the seen fractions.
    TrainDenoiser,
    /// Denoise the configured input images.
    Denoise {
        /// Dataset directory or sample file; overrides the `input` key.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Report denoising and perception metrics on the test dataset.
    Evaluate,
    /// Run the gradient, oracle and exactness suites.
    Verify {
        /// Corrupt the backward rule of this op first.
        #[arg(long, hide = true, env = "FOUNDDIFF_FAULT")]
        fault: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut run = Run::load(cli.config.as_deref(), cli.seed, cli.out)?;
    match cli.command {
        Command::Simulate => commands::simulate(&run),
        Command::TrainPerception => commands::train_perception_cmd(&run),
        Command::TrainDenoiser => commands::train_denoiser_cmd(&run),
        Command::Denoise { input } => {
            if let Some(input) = input {
                run.cfg.input = input;
            }
            commands::denoise_cmd(&run)
        }
        Command::Evaluate => commands::evaluate_cmd(&run),
        Command::Verify { fault } => commands::verify_cmd(&run, fault.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
