//! Training pairs and the greedy and joint schedules.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{add_gaussian_noise, psnr, GaussianStream, ImageTensor, NoiseSpec};
use crate::network::{
    run_stages, stage_forward, ColorMode, MatchedInput, Model, StageParams, DEFAULT_INIT_GAMMA,
    DEFAULT_INIT_SLOPE,
};
use crate::patch::PatchGeometry;
use crate::pnm::load_image;
use crate::rbf::RbfGrid;
use crate::train::backward::{network_loss_and_grads, stage_backward};
use crate::train::lbfgs::{lbfgs_minimize, IterationRecord, LbfgsOptions, StopReason};
use crate::train::loss::output_loss;
use crate::train::params::{
    flatten_grads, flatten_model, flatten_stage, flatten_stage_grads, unflatten_model,
    unflatten_stage,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub clean_dir: PathBuf,
    /// Side length of the square training crops.
    pub crop: usize,
    /// Number of training pairs.
    pub pairs: usize,
    /// Noise level on the 0..255 scale, for both modes.
    pub sigma: f64,
    pub seed: u64,
    pub stages: usize,
    pub geom: PatchGeometry,
    pub mode: ColorMode,
    pub greedy_iters: usize,
    pub joint_iters: usize,
    pub kernels: usize,
    pub delta: f64,
    /// `None` means `ln 2 / h²` for grid spacing `h`.
    pub epsilon: Option<f64>,
    pub history: usize,
}

impl TrainConfig {
    /// Defaults for everything but the corpus location and noise level.
    pub fn new(clean_dir: impl Into<PathBuf>, sigma: f64, mode: ColorMode) -> Self {
        Self {
            clean_dir: clean_dir.into(),
            crop: 64,
            pairs: 8,
            sigma,
            seed: 0,
            stages: 1,
            geom: PatchGeometry {
                patch_rows: 5,
                patch_cols: 5,
                window: 17,
                group_size: 8,
            },
            mode,
            greedy_iters: 100,
            joint_iters: 400,
            kernels: 63,
            delta: mode.default_delta(),
            epsilon: None,
            history: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pairs == 0 || self.stages == 0 || self.crop == 0 || self.history == 0 {
            return bad("pairs, stages, crop and history must be positive".into());
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad(format!(
                "sigma must be a non-negative number, got {}",
                self.sigma
            ));
        }
        self.geom
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let need = self.geom.patch_rows.max(self.geom.patch_cols) + self.geom.window - 1;
        if self.crop < need {
            return bad(format!(
                "crop {} is smaller than patch plus search window ({need})",
                self.crop
            ));
        }
        self.grid().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<RbfGrid> {
        RbfGrid::new(self.kernels, self.delta, self.epsilon)
    }

    /// Noise level in the units of the image data.
    pub fn noise_sigma(&self) -> f64 {
        self.sigma * self.mode.peak() / 255.0
    }
}

/// One clean crop and its prepared noisy observation.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    /// Clean crop in image space (RGB for color).
    pub clean: ImageTensor,
    pub input: MatchedInput,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub pairs: Vec<TrainingPair>,
}

fn crop(img: &ImageTensor, top: usize, left: usize, size: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(size * size * img.channels());
    for plane in img.planes() {
        for r in top..top + size {
            data.extend_from_slice(&plane[r * w + left..r * w + left + size]);
        }
    }
    debug_assert!(top + size <= h);
    ImageTensor::new(size, size, img.channels(), data, img.peak())
}

impl TrainingSet {
    /// Cuts `cfg.pairs` crops out of `images` (pair `q` comes from image
    /// `q mod n`, at a position drawn from the seed) and adds seeded noise.
    pub fn from_images(images: &[ImageTensor], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let mut rng = GaussianStream::new(cfg.seed);
        let mut jobs = Vec::with_capacity(cfg.pairs);
        for q in 0..cfg.pairs {
            let img = &images[q % images.len()];
            if img.channels() != cfg.mode.channels() {
                return Err(Error::Config(format!(
                    "corpus image {} has {} channel(s), expected {}",
                    q % images.len(),
                    img.channels(),
                    cfg.mode.channels()
                )));
            }
            if img.height() < cfg.crop || img.width() < cfg.crop {
                return Err(Error::Config(format!(
                    "corpus image {} ({}x{}) is smaller than the crop size {}",
                    q % images.len(),
                    img.height(),
                    img.width(),
                    cfg.crop
                )));
            }
            let top = (rng.next_uniform() * (img.height() - cfg.crop + 1) as f64) as usize;
            let left = (rng.next_uniform() * (img.width() - cfg.crop + 1) as f64) as usize;
            let noise_seed = rng.next_u64();
            jobs.push((q, crop(img, top, left, cfg.crop)?, noise_seed));
        }
        let spec_sigma = cfg.noise_sigma();
        let pairs: Vec<Result<TrainingPair>> = jobs
            .into_par_iter()
            .map(|(q, clean, seed)| {
                let noisy = add_gaussian_noise(&clean, NoiseSpec::new(spec_sigma, seed)?);
                if noisy == clean {
                    return Err(Error::Config(format!(
                        "training pair {q} has zero noise, so its loss is undefined"
                    )));
                }
                let input = MatchedInput::prepare(&noisy, &cfg.geom, cfg.mode)?;
                Ok(TrainingPair { clean, input })
            })
            .collect();
        Ok(Self {
            pairs: pairs.into_iter().collect::<Result<_>>()?,
        })
    }

    /// Loads every `.pgm`/`.ppm`/`.pnm` in `cfg.clean_dir` (sorted by name).
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let images = load_corpus(&cfg.clean_dir)?;
        Self::from_images(&images, cfg)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Mean PSNR of the noisy inputs against the clean crops.
    pub fn noisy_psnr(&self, mode: ColorMode) -> Result<f64> {
        let mut sum = 0.0;
        for p in &self.pairs {
            let noisy = match mode {
                ColorMode::Gray => p.input.noisy.clone(),
                ColorMode::Color => crate::image::opponent_to_rgb(&p.input.noisy)?,
            };
            sum += psnr(&noisy, &p.clean)?;
        }
        Ok(sum / self.pairs.len() as f64)
    }
}

/// Image files in `dir` with a PNM extension, sorted by file name.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|s| s.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm")) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<ImageTensor>> {
    let files = corpus_files(dir)?;
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no PGM/PPM images in {}",
            dir.display()
        )));
    }
    files.iter().map(load_image).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Greedy { stage: usize },
    Joint,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Greedy { stage } => write!(f, "greedy stage {stage}"),
            Phase::Joint => write!(f, "joint"),
        }
    }
}

/// Outcome of one optimizer run.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub phase: Phase,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub stop: StopReason,
}

/// Sum of per-sample values and gradients, reduced in sample order.
fn reduce(parts: Vec<Result<(f64, Vec<f64>)>>, n: usize) -> Result<(f64, Vec<f64>)> {
    let mut f = 0.0;
    let mut g = vec![0.0; n];
    for p in parts {
        let (fq, gq) = p?;
        f += fq;
        for (a, b) in g.iter_mut().zip(&gq) {
            *a += b;
        }
    }
    Ok((f, g))
}

/// Greedy objective of one stage: `Σ_q ℓ(stage(z_q))` and its gradient
/// with respect to the flattened stage parameters.
pub fn stage_objective(
    sp: &StageParams,
    inputs: &[ImageTensor],
    set: &TrainingSet,
    model: &Model,
) -> Result<(f64, Vec<f64>)> {
    let bx = model.box_constraint();
    let parts = set
        .pairs
        .par_iter()
        .zip(inputs)
        .map(|(pair, z)| {
            let (out, tape) = stage_forward(z, &pair.input, sp, &bx)?;
            let (loss, upstream) = output_loss(model.mode, &out, &pair.clean)?;
            let g = stage_backward(&tape, &upstream, sp, &pair.input)?;
            let mut flat = Vec::with_capacity(sp.param_count());
            flatten_stage_grads(&g, &mut flat);
            Ok((loss, flat))
        })
        .collect();
    reduce(parts, sp.param_count())
}

/// Joint objective `Σ_q ℓ(network(y_q))` and its gradient over all stages.
pub fn network_objective(model: &Model, set: &TrainingSet) -> Result<(f64, Vec<f64>)> {
    let parts = set
        .pairs
        .par_iter()
        .map(|pair| {
            let (loss, grads) = network_loss_and_grads(model, &pair.input, &pair.clean)?;
            Ok((loss, flatten_grads(&grads)))
        })
        .collect();
    reduce(parts, model.param_count())
}

/// Mean PSNR of the network output over the training set.
pub fn mean_psnr(model: &Model, set: &TrainingSet) -> Result<f64> {
    Ok(-network_loss(model, set)? / set.len() as f64)
}

/// Joint objective value alone, without the backward pass.
pub fn network_loss(model: &Model, set: &TrainingSet) -> Result<f64> {
    let parts: Vec<Result<f64>> = set
        .pairs
        .par_iter()
        .map(|pair| {
            let (outs, _) = run_stages(model, &pair.input)?;
            let (loss, _) = output_loss(model.mode, outs.last().expect("non-empty"), &pair.clean)?;
            Ok(loss)
        })
        .collect();
    let mut f = 0.0;
    for p in parts {
        f += p?;
    }
    Ok(f)
}

pub type ProgressSink<'a> = &'a mut dyn FnMut(Phase, &IterationRecord);

/// Trains stages one at a time, each on the outputs of the stages before it.
pub fn greedy_train(
    set: &TrainingSet,
    cfg: &TrainConfig,
    log: ProgressSink<'_>,
) -> Result<(Model, Vec<PhaseSummary>)> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let grid = cfg.grid()?;
    let mut model = Model::initial(1, cfg.geom, cfg.mode, grid.clone(), cfg.sigma)?;
    model.stages.clear();
    let mut inputs: Vec<ImageTensor> = set.pairs.iter().map(|p| p.input.noisy.clone()).collect();
    let opts = LbfgsOptions::with_iters(cfg.greedy_iters, cfg.history);
    let bx = crate::network::BoxConstraint::for_mode(cfg.mode);
    let mut summaries = Vec::with_capacity(cfg.stages);

    for t in 1..=cfg.stages {
        let phase = Phase::Greedy { stage: t };
        let init = StageParams::init(
            &cfg.geom,
            &grid,
            cfg.mode,
            DEFAULT_INIT_GAMMA,
            DEFAULT_INIT_SLOPE,
        )?;
        let mut theta0 = Vec::with_capacity(init.param_count());
        flatten_stage(&init, &mut theta0);
        let mut sp = init.clone();
        let mut initial = None;
        let report = lbfgs_minimize(
            |theta: &[f64]| {
                let mut trial = init.clone();
                unflatten_stage(&mut trial, theta)?;
                stage_objective(&trial, &inputs, set, &model)
            },
            theta0,
            &opts,
            |rec| {
                initial.get_or_insert(rec.objective);
                log(phase, rec);
            },
        )?;
        unflatten_stage(&mut sp, &report.x)?;
        summaries.push(PhaseSummary {
            phase,
            initial_objective: initial.expect("starting point is always logged"),
            final_objective: report.objective,
            iterations: report.iterations,
            stop: report.stop,
        });

        let next: Vec<Result<ImageTensor>> = set
            .pairs
            .par_iter()
            .zip(&inputs)
            .map(|(pair, z)| Ok(stage_forward(z, &pair.input, &sp, &bx)?.0))
            .collect();
        inputs = next.into_iter().collect::<Result<_>>()?;
        model.stages.push(sp);
    }
    model.validate()?;
    Ok((model, summaries))
}

/// Refines all stages together against the final output.
pub fn joint_train(
    model: &Model,
    set: &TrainingSet,
    cfg: &TrainConfig,
    log: ProgressSink<'_>,
) -> Result<(Model, PhaseSummary)> {
    model.validate()?;
    if set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let opts = LbfgsOptions::with_iters(cfg.joint_iters, cfg.history);
    let mut initial = None;
    let report = lbfgs_minimize(
        |theta: &[f64]| {
            let mut trial = model.clone();
            unflatten_model(&mut trial, theta)?;
            network_objective(&trial, set)
        },
        flatten_model(model),
        &opts,
        |rec| {
            initial.get_or_insert(rec.objective);
            log(Phase::Joint, rec);
        },
    )?;
    let mut out = model.clone();
    unflatten_model(&mut out, &report.x)?;
    Ok((
        out,
        PhaseSummary {
            phase: Phase::Joint,
            initial_objective: initial.expect("starting point is always logged"),
            final_objective: report.objective,
            iterations: report.iterations,
            stop: report.stop,
        },
    ))
}

/// Greedy training followed by joint refinement when `cfg.joint_iters > 0`.
pub fn train(
    set: &TrainingSet,
    cfg: &TrainConfig,
    log: ProgressSink<'_>,
) -> Result<(Model, Vec<PhaseSummary>)> {
    let (model, mut summaries) = greedy_train(set, cfg, &mut *log)?;
    if cfg.joint_iters == 0 {
        return Ok((model, summaries));
    }
    let (model, joint) = joint_train(&model, set, cfg, log)?;
    summaries.push(joint);
    Ok((model, summaries))
}

/// CSV header of the progress log.
pub const PROGRESS_HEADER: &str = "iter,objective,grad_norm,step";

pub fn progress_line(rec: &IterationRecord) -> String {
    format!(
        "{},{},{},{}",
        rec.iter, rec.objective, rec.grad_norm, rec.step
    )
}
