use std::io::{stderr, stdout, Write};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nlnet_cli::commands::*;

/// Non-local network image denoiser.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add seeded Gaussian noise to an image.
    AddNoise(AddNoiseArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Denoise one image.
    Denoise(DenoiseArgs),
    /// Noise, denoise and score every image in a directory.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mut out, mut err) = (stdout().lock(), stderr());
    let result = match &cli.command {
        Command::AddNoise(a) => cmd_add_noise(a, &mut out, &mut err),
        Command::Train(a) => cmd_train(a, &mut out, &mut err),
        Command::Denoise(a) => cmd_denoise(a, &mut out, &mut err),
        Command::Eval(a) => cmd_eval(a, &mut out, &mut err),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut out, &mut err),
    };
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
