//! Analytic gradients of one stage and of the whole network.
//!
//! For a stage with input `z`, observation `y` and upstream gradient `g`
//! (with respect to the stage output), let `e = mask ⊙ g`,
//! `z_r = L_r z`, `s_r = ψ(z_r)` and `t_r = ψ'(z_r) ⊙ (L_r e)`. Then
//!
//! * `∂ℓ/∂γ    = (y - z)ᵀ e`
//! * `∂ℓ/∂π_ij = -Σ_r ρ_j(z_ri) (L_r e)_i`
//! * `∂ℓ/∂w_k  = -Σ_r [ (F e_{i_{r,k}})ᵀ s_r + t_rᵀ F z_{i_{r,k}} ]`
//! * `∂ℓ/∂F    = -Σ_r [ s_r (B_r e)ᵀ + t_r (B_r z)ᵀ ]`, with `B_r x = Σ_k w_k x_{i_{r,k}}`
//! * `∂ℓ/∂z    = (1 - γ) e - Lᵀ t`
//!
//! Color stages share `γ`, `F` and `w` across channels, so those gradients
//! are summed over channels; each channel owns its block of `π`.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::network::{run_stages, ChannelTape, MatchedInput, Model, StageParams, StageTape};
use crate::nonlocal::NonLocalOp;
use crate::train::loss::output_loss;

/// Gradients of the loss with respect to one stage's parameters and input.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGrads {
    pub d_gamma: f64,
    /// Same layout as [`RbfMixture::weights`](crate::rbf::RbfMixture::weights).
    pub d_pi: Vec<f64>,
    pub d_w: Vec<f64>,
    pub d_f: Array2<f64>,
    pub d_input: ImageTensor,
}

struct ChannelGrads {
    d_gamma: f64,
    d_pi: Vec<f64>,
    d_w: Vec<f64>,
    d_f: Array2<f64>,
    d_input: Vec<f64>,
}

fn channel_backward(
    c: usize,
    tape: &ChannelTape,
    z: &[f64],
    y: &[f64],
    e: &[f64],
    sp: &StageParams,
    op: &NonLocalOp<'_>,
) -> ChannelGrads {
    let grid = sp.mixture.grid();
    let m = grid.kernels();
    let fc = op.coeffs();
    let rows = tape.zcoeffs.nrows();

    let d_gamma: f64 = y
        .iter()
        .zip(z)
        .zip(e)
        .map(|((yv, zv), ev)| (yv - zv) * ev)
        .sum();

    // L e, both before (ef) and after (ez) the group sum.
    let ef = op.transform_patches(e);
    let ez = op.group_sum(&ef);

    // Column-parallel pass: π gradient and t = ψ' ⊙ L e. Each column sums
    // over r serially, so the result does not depend on thread scheduling.
    let cols: Vec<(Vec<f64>, Vec<f64>)> = (0..fc)
        .into_par_iter()
        .map(|i| {
            let pi_row = sp.mixture.row(c, i);
            let mut dpi = vec![0.0; m];
            let mut t_col = vec![0.0; rows];
            for r in 0..rows {
                let x = tape.zcoeffs[[r, i]];
                let le = ez[[r, i]];
                let mut dv = 0.0;
                for j in grid.support(x) {
                    let d = x - grid.centers()[j];
                    let rho = (-grid.epsilon() * d * d).exp();
                    dpi[j] -= rho * le;
                    dv += pi_row[j] * rho * d;
                }
                t_col[r] = -2.0 * grid.epsilon() * dv * le;
            }
            (dpi, t_col)
        })
        .collect();
    let mut d_pi = Vec::with_capacity(fc * m);
    let mut t = Array2::zeros((rows, fc));
    for (i, (dpi, t_col)) in cols.into_iter().enumerate() {
        d_pi.extend(dpi);
        for (r, v) in t_col.into_iter().enumerate() {
            t[[r, i]] = v;
        }
    }

    // w: per-patch contributions, reduced serially in patch order.
    let k = op.weights.len();
    let per_r: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|r| {
            let s_r = tape.psi.row(r);
            let t_r = t.row(r);
            op.groups
                .group(r)
                .iter()
                .map(|&p| {
                    let p = p as usize;
                    -(ef.row(p).dot(&s_r) + tape.fcoeffs.row(p).dot(&t_r))
                })
                .collect()
        })
        .collect();
    let mut d_w = vec![0.0; k];
    for contrib in &per_r {
        for (dw, v) in d_w.iter_mut().zip(contrib) {
            *dw += v;
        }
    }

    // F: scatter s and t back to the patches they came from.
    let g_s = op.group_scatter(&tape.psi);
    let g_t = op.group_scatter(&t);
    let e_patches = op.index.gather(e);
    let z_patches = op.index.gather(z);
    let d_f = -(g_s.t().dot(&e_patches) + g_t.t().dot(&z_patches));

    let back = op.synthesize(&g_t);
    let d_input = e
        .iter()
        .zip(&back)
        .map(|(ev, bv)| (1.0 - sp.gamma) * ev - bv)
        .collect();

    ChannelGrads {
        d_gamma,
        d_pi,
        d_w,
        d_f,
        d_input,
    }
}

/// Backpropagates `upstream` (gradient with respect to the stage output)
/// through one stage.
pub fn stage_backward(
    tape: &StageTape,
    upstream: &ImageTensor,
    sp: &StageParams,
    input: &MatchedInput,
) -> Result<StageGrads> {
    let z = &tape.input;
    if !upstream.same_shape(z) || !input.noisy.same_shape(z) {
        return Err(Error::invalid(
            "stage_backward: gradient, tape and input shapes differ",
        ));
    }
    if tape.channels.len() != z.channels() || sp.mixture.channels() != z.channels() {
        return Err(Error::invalid(
            "stage_backward: tape does not match the stage",
        ));
    }
    let op = input.op(sp)?;
    if tape.channels[0].zcoeffs.dim() != (op.index.patch_count(), op.coeffs()) {
        return Err(Error::invalid(
            "stage_backward: tape coefficients do not match the stage",
        ));
    }
    let e: Vec<f64> = upstream
        .data()
        .iter()
        .zip(&tape.mask)
        .map(|(&g, &inside)| if inside { g } else { 0.0 })
        .collect();
    let n = z.pixels();

    let per_channel: Vec<ChannelGrads> = (0..z.channels())
        .into_par_iter()
        .map(|c| {
            channel_backward(
                c,
                &tape.channels[c],
                z.plane(c),
                input.noisy.plane(c),
                &e[c * n..(c + 1) * n],
                sp,
                &op,
            )
        })
        .collect();

    let mut d_gamma = 0.0;
    let mut d_pi = Vec::with_capacity(sp.mixture.weights().len());
    let mut d_w = vec![0.0; sp.weights.len()];
    let mut d_f = Array2::zeros(sp.transform.matrix().dim());
    let mut d_input = Vec::with_capacity(z.data().len());
    for g in per_channel {
        d_gamma += g.d_gamma;
        d_pi.extend(g.d_pi);
        for (a, b) in d_w.iter_mut().zip(&g.d_w) {
            *a += b;
        }
        d_f += &g.d_f;
        d_input.extend(g.d_input);
    }
    Ok(StageGrads {
        d_gamma,
        d_pi,
        d_w,
        d_f,
        d_input: z.with_data(d_input)?,
    })
}

/// Reverse sweep through all stages, seeded with the loss gradient of the
/// final output against `clean`.
pub fn network_backward(
    tapes: &[StageTape],
    output: &ImageTensor,
    clean: &ImageTensor,
    model: &Model,
    input: &MatchedInput,
) -> Result<(f64, Vec<StageGrads>)> {
    if tapes.len() != model.stages.len() {
        return Err(Error::invalid(format!(
            "got {} tapes for {} stages",
            tapes.len(),
            model.stages.len()
        )));
    }
    let (loss, mut upstream) = output_loss(model.mode, output, clean)?;
    let mut grads = Vec::with_capacity(tapes.len());
    for (tape, sp) in tapes.iter().zip(&model.stages).rev() {
        let g = stage_backward(tape, &upstream, sp, input)?;
        upstream = g.d_input.clone();
        grads.push(g);
    }
    grads.reverse();
    Ok((loss, grads))
}

/// Loss of the full network on one sample and the gradient for every stage.
pub fn network_loss_and_grads(
    model: &Model,
    input: &MatchedInput,
    clean: &ImageTensor,
) -> Result<(f64, Vec<StageGrads>)> {
    let (outs, tapes) = run_stages(model, input)?;
    network_backward(&tapes, outs.last().expect("non-empty"), clean, model, input)
}
