//! Negative-PSNR training loss and its gradient.

use std::f64::consts::LN_10;

use crate::error::{Error, Result};
use crate::image::{opponent_to_rgb, opponent_to_rgb_adjoint, psnr, ImageTensor};
use crate::network::ColorMode;

/// `-psnr(yhat, x)`.
pub fn loss(yhat: &ImageTensor, x: &ImageTensor) -> Result<f64> {
    Ok(-psnr(yhat, x)?)
}

/// `(20 / ln 10) (yhat - x) / ||yhat - x||²`.
pub fn loss_grad(yhat: &ImageTensor, x: &ImageTensor) -> Result<ImageTensor> {
    if !yhat.same_shape(x) || yhat.peak() != x.peak() {
        return Err(Error::invalid("loss_grad: images differ in shape or peak"));
    }
    let diff: Vec<f64> = yhat
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a - b)
        .collect();
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    if sq == 0.0 {
        return Err(Error::InfinitePsnr);
    }
    let scale = 20.0 / LN_10 / sq;
    yhat.with_data(diff.into_iter().map(|d| scale * d).collect())
}

/// Loss of a network-space output against the clean image, and the gradient
/// with respect to that output. Color outputs are compared in RGB.
pub fn output_loss(
    mode: ColorMode,
    output: &ImageTensor,
    clean: &ImageTensor,
) -> Result<(f64, ImageTensor)> {
    match mode {
        ColorMode::Gray => Ok((loss(output, clean)?, loss_grad(output, clean)?)),
        ColorMode::Color => {
            let rgb = opponent_to_rgb(output)?;
            let g = loss_grad(&rgb, clean)?;
            Ok((loss(&rgb, clean)?, opponent_to_rgb_adjoint(&g)?))
        }
    }
}
