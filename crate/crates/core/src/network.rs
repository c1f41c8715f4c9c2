//! Stages of the unrolled network and multi-stage inference.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{
    opponent_to_rgb, rgb_to_opponent, ImageTensor, COLOR_PEAK, GRAY_PEAK, OPPONENT,
};
use crate::nonlocal::{CoeffField, GroupWeights, NonLocalOp, PatchTransform};
use crate::patch::{block_match, GroupIndexSet, PatchGeometry, PatchIndex};
use crate::rbf::{fit_linear_init, RbfGrid, RbfMixture};

/// Slope of the linear shrinkage fitted into fresh mixtures.
pub const DEFAULT_INIT_SLOPE: f64 = 0.1;
/// Default `γ` of a fresh stage.
pub const DEFAULT_INIT_GAMMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    Gray,
    /// RGB input processed in opponent space with per-channel mixtures.
    Color,
}

impl ColorMode {
    pub fn channels(self) -> usize {
        match self {
            ColorMode::Gray => 1,
            ColorMode::Color => 3,
        }
    }

    pub fn peak(self) -> f64 {
        match self {
            ColorMode::Gray => GRAY_PEAK,
            ColorMode::Color => COLOR_PEAK,
        }
    }

    /// Default RBF center span for the mode's intensity scale.
    pub fn default_delta(self) -> f64 {
        match self {
            ColorMode::Gray => 100.0,
            ColorMode::Color => 0.4,
        }
    }

    pub fn from_channels(c: usize) -> Result<Self> {
        match c {
            1 => Ok(ColorMode::Gray),
            3 => Ok(ColorMode::Color),
            _ => Err(Error::invalid(format!("no color mode has {c} channels"))),
        }
    }
}

/// Per-channel intensity bounds `[a_c, b_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxConstraint {
    bounds: Vec<(f64, f64)>,
}

impl BoxConstraint {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.iter().any(|&(a, b)| !(a < b)) {
            return Err(Error::invalid("box bounds need a < b"));
        }
        Ok(Self { bounds })
    }

    /// `[0, 255]` for grayscale; for color, the per-channel range of the RGB
    /// unit cube mapped through the opponent transform.
    pub fn for_mode(mode: ColorMode) -> Self {
        match mode {
            ColorMode::Gray => Self {
                bounds: vec![(0.0, GRAY_PEAK)],
            },
            ColorMode::Color => {
                let bounds = OPPONENT
                    .iter()
                    .map(|row| {
                        let mut lo = f64::INFINITY;
                        let mut hi = f64::NEG_INFINITY;
                        for corner in 0..8u32 {
                            let v: f64 =
                                (0..3).map(|c| row[c] * f64::from((corner >> c) & 1)).sum();
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                        (lo, hi)
                    })
                    .collect();
                Self { bounds }
            }
        }
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn channels(&self) -> usize {
        self.bounds.len()
    }
}

/// Learnable parameters of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub gamma: f64,
    pub transform: PatchTransform,
    pub weights: GroupWeights,
    pub mixture: RbfMixture,
}

impl StageParams {
    /// DCT transform, purely local weights, every mixture row fitted to
    /// `slope * x`, and the given `γ`.
    pub fn init(
        geom: &PatchGeometry,
        grid: &RbfGrid,
        mode: ColorMode,
        gamma: f64,
        slope: f64,
    ) -> Result<Self> {
        let transform = PatchTransform::dct(geom)?;
        let row = fit_linear_init(grid, slope)?;
        let mixture =
            RbfMixture::repeated(grid.clone(), mode.channels(), transform.coeffs(), &row)?;
        Ok(Self {
            gamma,
            weights: GroupWeights::local(geom.group_size),
            transform,
            mixture,
        })
    }

    pub fn validate(&self, geom: &PatchGeometry, mode: ColorMode) -> Result<()> {
        if !self.gamma.is_finite() {
            return Err(Error::invalid("gamma must be finite"));
        }
        if self.transform.patch_len() != geom.patch_len() {
            return Err(Error::invalid("patch transform does not match patch size"));
        }
        if self.weights.len() != geom.group_size || self.weights.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("group weights must be K finite values"));
        }
        if self.mixture.channels() != mode.channels()
            || self.mixture.coeffs() != self.transform.coeffs()
        {
            return Err(Error::invalid("mixture dimensions do not match the stage"));
        }
        Ok(())
    }

    /// Number of scalars in the flattened parameter vector.
    pub fn param_count(&self) -> usize {
        1 + self.transform.matrix().len() + self.weights.len() + self.mixture.weights().len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub stages: Vec<StageParams>,
    pub geom: PatchGeometry,
    pub mode: ColorMode,
    pub grid: RbfGrid,
    pub sigma_trained: f64,
}

impl Model {
    /// A model whose stages all carry the default initialization.
    pub fn initial(
        stages: usize,
        geom: PatchGeometry,
        mode: ColorMode,
        grid: RbfGrid,
        sigma: f64,
    ) -> Result<Self> {
        let stage = StageParams::init(&geom, &grid, mode, DEFAULT_INIT_GAMMA, DEFAULT_INIT_SLOPE)?;
        let m = Self {
            stages: vec![stage; stages],
            geom,
            mode,
            grid,
            sigma_trained: sigma,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("a model needs at least one stage"));
        }
        self.geom.validate()?;
        for s in &self.stages {
            s.validate(&self.geom, self.mode)?;
            if s.mixture.grid() != &self.grid {
                return Err(Error::invalid(
                    "stage mixture grid differs from the model grid",
                ));
            }
        }
        Ok(())
    }

    pub fn box_constraint(&self) -> BoxConstraint {
        BoxConstraint::for_mode(self.mode)
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(StageParams::param_count).sum()
    }
}

/// Elementwise clamp of each channel to its bounds.
pub fn project_box(u: &ImageTensor, bx: &BoxConstraint) -> Result<ImageTensor> {
    if u.channels() != bx.channels() {
        return Err(Error::invalid(
            "box constraint channel count differs from image",
        ));
    }
    let mut out = u.clone();
    for (c, &(a, b)) in bx.bounds().iter().enumerate() {
        for v in out.plane_mut(c) {
            *v = v.clamp(a, b);
        }
    }
    Ok(out)
}

/// The noisy observation in network space together with its patch groups.
///
/// Groups are computed once (from the luminance plane for color input) and
/// shared by every stage.
#[derive(Debug, Clone)]
pub struct MatchedInput {
    pub noisy: ImageTensor,
    pub index: PatchIndex,
    pub groups: GroupIndexSet,
}

impl MatchedInput {
    /// Converts color input to opponent space and runs block matching.
    pub fn prepare(noisy: &ImageTensor, geom: &PatchGeometry, mode: ColorMode) -> Result<Self> {
        if noisy.channels() != mode.channels() {
            return Err(Error::invalid(format!(
                "model expects {} channel(s), image has {}",
                mode.channels(),
                noisy.channels()
            )));
        }
        let noisy = match mode {
            ColorMode::Gray => noisy.clone(),
            ColorMode::Color => rgb_to_opponent(noisy)?,
        };
        let lum = ImageTensor::new(
            noisy.height(),
            noisy.width(),
            1,
            noisy.plane(0).to_vec(),
            noisy.peak(),
        )?;
        let groups = block_match(&lum, geom)?;
        let index = PatchIndex::new(noisy.height(), noisy.width(), geom)?;
        Ok(Self {
            noisy,
            index,
            groups,
        })
    }

    pub fn op<'a>(&'a self, sp: &'a StageParams) -> Result<NonLocalOp<'a>> {
        NonLocalOp::new(&self.index, &sp.transform, &sp.weights, &self.groups)
    }
}

/// Intermediate quantities of one channel of a stage, kept for backprop.
#[derive(Debug, Clone)]
pub struct ChannelTape {
    /// `F x_p` of the stage input for every patch.
    pub fcoeffs: CoeffField,
    /// Group-weighted coefficients `z_r = L_r z`.
    pub zcoeffs: CoeffField,
    /// `ψ(z_r)`.
    pub psi: CoeffField,
}

/// Everything `stage_backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct StageTape {
    /// Stage input.
    pub input: ImageTensor,
    /// Pre-projection image.
    pub u: ImageTensor,
    /// `true` where `u` lies inside the box (projection derivative 1).
    pub mask: Vec<bool>,
    pub channels: Vec<ChannelTape>,
}

/// Computes `u_c` for one channel and its tape.
pub fn forward_channel(
    c: usize,
    z: &[f64],
    y: &[f64],
    sp: &StageParams,
    op: &NonLocalOp<'_>,
) -> Result<(Vec<f64>, ChannelTape)> {
    let fcoeffs = op.transform_patches(z);
    let zcoeffs = op.group_sum(&fcoeffs);
    let psi = sp.mixture.apply_psi(c, &zcoeffs)?;
    let back = op.adjoint(&psi);
    let g = sp.gamma;
    let u = z
        .iter()
        .zip(y)
        .zip(&back)
        .map(|((&zv, &yv), &bv)| zv * (1.0 - g) + g * yv - bv)
        .collect();
    Ok((
        u,
        ChannelTape {
            fcoeffs,
            zcoeffs,
            psi,
        },
    ))
}

/// One proximal-gradient stage:
/// `P_C(z (1 - γ) + γ y - Lᵀ ψ(L z))`, applied per channel with shared `F`, `w`, `γ`.
pub fn stage_forward(
    z: &ImageTensor,
    input: &MatchedInput,
    sp: &StageParams,
    bx: &BoxConstraint,
) -> Result<(ImageTensor, StageTape)> {
    let y = &input.noisy;
    if !z.same_shape(y) {
        return Err(Error::invalid(
            "stage input and observation differ in shape",
        ));
    }
    if sp.mixture.channels() != z.channels() || bx.channels() != z.channels() {
        return Err(Error::invalid(
            "stage parameters do not match the channel count",
        ));
    }
    let op = input.op(sp)?;
    let results: Vec<Result<(Vec<f64>, ChannelTape)>> = (0..z.channels())
        .into_par_iter()
        .map(|c| forward_channel(c, z.plane(c), y.plane(c), sp, &op))
        .collect();
    let mut u_data = Vec::with_capacity(z.data().len());
    let mut channels = Vec::with_capacity(z.channels());
    for r in results {
        let (u, t) = r?;
        u_data.extend(u);
        channels.push(t);
    }
    let u = z.with_data(u_data)?;
    let out = project_box(&u, bx)?;
    let mut mask = Vec::with_capacity(u.data().len());
    for (c, &(a, b)) in bx.bounds().iter().enumerate() {
        mask.extend(u.plane(c).iter().map(|&v| a <= v && v <= b));
    }
    Ok((
        out,
        StageTape {
            input: z.clone(),
            u,
            mask,
            channels,
        },
    ))
}

/// Runs every stage from `x⁰ = y`, returning all stage outputs and tapes.
pub fn run_stages(
    model: &Model,
    input: &MatchedInput,
) -> Result<(Vec<ImageTensor>, Vec<StageTape>)> {
    let bx = model.box_constraint();
    let mut x = input.noisy.clone();
    let mut outs = Vec::with_capacity(model.stages.len());
    let mut tapes = Vec::with_capacity(model.stages.len());
    for sp in &model.stages {
        let (next, tape) = stage_forward(&x, input, sp, &bx)?;
        outs.push(next.clone());
        tapes.push(tape);
        x = next;
    }
    Ok((outs, tapes))
}

/// Denoises a grayscale image (0..255) or an RGB image (0..1).
pub fn denoise(model: &Model, noisy: &ImageTensor) -> Result<ImageTensor> {
    model.validate()?;
    let input = MatchedInput::prepare(noisy, &model.geom, model.mode)?;
    let (mut outs, _) = run_stages(model, &input)?;
    let last = outs.pop().expect("model has at least one stage");
    match model.mode {
        ColorMode::Gray => Ok(last),
        ColorMode::Color => opponent_to_rgb(&last),
    }
}
