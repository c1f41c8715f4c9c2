//! The subcommands. Each writes its results to `out`, diagnostics and timing
//! to `err`, and reports failure as an exit code plus message.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rayon::prelude::*;

use nlnet::image::{add_gaussian_noise, psnr, GaussianStream, NoiseSpec};
use nlnet::network::{denoise, ColorMode};
use nlnet::pnm::{decode_pnm, encode_pnm, load_image, save_image};
use nlnet::train::gradcheck::{gradcheck, GradcheckOptions};
use nlnet::train::schedule::{
    corpus_files, progress_line, train, Phase, TrainingSet, PROGRESS_HEADER,
};
use nlnet::Error;

use crate::config::load_config;
use crate::modelfile::{load_model, save_model};

/// A failed command: the process exit status and what to print.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

/// Numeric breakdowns exit with 3, everything else with 2.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numeric { .. } | Error::InfinitePsnr => 3,
            _ => 2,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(2, format!("write failed: {e}"))
    }
}

pub type CmdResult = Result<(), CliError>;

/// Converts a 0..255 noise level into the data units of an image.
fn data_sigma(sigma: f64, channels: usize) -> f64 {
    if channels == 1 {
        sigma
    } else {
        sigma / 255.0
    }
}

#[derive(Debug, Clone, Args)]
pub struct AddNoiseArgs {
    /// Noise standard deviation on the 0..255 scale.
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    pub input: PathBuf,
    pub output: PathBuf,
}

pub fn cmd_add_noise(args: &AddNoiseArgs, out: &mut dyn Write, _err: &mut dyn Write) -> CmdResult {
    let clean = load_image(&args.input)?;
    let spec = NoiseSpec::new(data_sigma(args.sigma, clean.channels()), args.seed)?;
    let bytes = encode_pnm(&add_gaussian_noise(&clean, spec));
    let saved = decode_pnm(&bytes)?;
    std::fs::write(&args.output, &bytes).map_err(|e| Error::Io {
        path: args.output.clone(),
        source: e,
    })?;
    match psnr(&saved, &clean) {
        Ok(p) => writeln!(out, "psnr {p:.4} dB")?,
        Err(Error::InfinitePsnr) => writeln!(out, "psnr inf dB")?,
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Progress goes to `out` as CSV with `# phase` comment lines.
pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let cfg = load_config(&args.config)?;
    let start = Instant::now();
    let set = TrainingSet::load(&cfg)?;
    writeln!(out, "{PROGRESS_HEADER}")?;
    let mut current: Option<Phase> = None;
    let mut write_err = None;
    let result = train(&set, &cfg, &mut |phase, rec| {
        let mut line = String::new();
        if current != Some(phase) {
            line.push_str(&format!("# {phase}\n"));
            current = Some(phase);
        }
        line.push_str(&progress_line(rec));
        if let Err(e) = writeln!(out, "{line}") {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let (model, summaries) = result?;
    save_model(&model, &args.out)?;
    for s in &summaries {
        writeln!(
            err,
            "{}: objective {} -> {} in {} iterations ({:?})",
            s.phase, s.initial_objective, s.final_objective, s.iterations, s.stop
        )?;
    }
    writeln!(err, "training took {:.2?}", start.elapsed())?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Clean reference; when given, the output PSNR is printed.
    #[arg(long)]
    pub clean: Option<PathBuf>,
    pub input: PathBuf,
    pub output: PathBuf,
}

pub fn cmd_denoise(args: &DenoiseArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let model = load_model(&args.model)?;
    let noisy = load_image(&args.input)?;
    if noisy.channels() != model.mode.channels() {
        return Err(CliError::new(
            2,
            format!(
                "mode mismatch: {} model, image has {} channel(s)",
                match model.mode {
                    ColorMode::Gray => "grayscale",
                    ColorMode::Color => "color",
                },
                noisy.channels()
            ),
        ));
    }
    let start = Instant::now();
    let result = denoise(&model, &noisy)?;
    writeln!(err, "denoised in {:.2?}", start.elapsed())?;
    save_image(&result, &args.output)?;
    if let Some(clean) = &args.clean {
        let clean = load_image(clean)?;
        writeln!(out, "noisy psnr {:.4} dB", psnr(&noisy, &clean)?)?;
        writeln!(out, "denoised psnr {:.4} dB", psnr(&result, &clean)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub clean_dir: PathBuf,
    /// Noise standard deviation on the 0..255 scale.
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// CSV `image,noisy_psnr,denoised_psnr`, one row per image in file-name
/// order, then an `average` row. Image `i` gets the `i`-th noise seed drawn
/// from `--seed`.
pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let model = load_model(&args.model)?;
    let files = corpus_files(&args.clean_dir)?;
    if files.is_empty() {
        return Err(CliError::new(
            2,
            format!("no PGM/PPM images in {}", args.clean_dir.display()),
        ));
    }
    let mut seeds = GaussianStream::new(args.seed);
    let jobs: Vec<(PathBuf, u64)> = files.into_iter().map(|f| (f, seeds.next_u64())).collect();
    let start = Instant::now();
    let rows: Vec<Result<(String, f64, f64), Error>> = jobs
        .par_iter()
        .map(|(path, seed)| {
            let clean = load_image(path)?;
            let noisy = add_gaussian_noise(
                &clean,
                NoiseSpec::new(data_sigma(args.sigma, clean.channels()), *seed)?,
            );
            let result = denoise(&model, &noisy)?;
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, psnr(&noisy, &clean)?, psnr(&result, &clean)?))
        })
        .collect();
    let mut csv = String::from("image,noisy_psnr,denoised_psnr\n");
    let (mut sum_noisy, mut sum_out) = (0.0, 0.0);
    let n = rows.len();
    for row in rows {
        let (name, a, b) = row?;
        csv.push_str(&format!("{name},{a},{b}\n"));
        sum_noisy += a;
        sum_out += b;
    }
    csv.push_str(&format!(
        "average,{},{}\n",
        sum_noisy / n as f64,
        sum_out / n as f64
    ));
    out.write_all(csv.as_bytes())?;
    writeln!(err, "evaluated {n} image(s) in {:.2?}", start.elapsed())?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale the analytic gamma gradient by 1.1 (harness self-test).
    #[arg(long, hide = true)]
    pub corrupt_gamma: bool,
}

/// Prints the per-class report; exit status 1 when any class fails.
pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let start = Instant::now();
    let report = gradcheck(&GradcheckOptions {
        seed: args.seed,
        corrupt_gamma: args.corrupt_gamma,
    })?;
    out.write_all(report.to_csv().as_bytes())?;
    writeln!(err, "gradcheck took {:.2?}", start.elapsed())?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::new(1, "gradient check failed"))
    }
}
