//! Non-local unrolled proximal-gradient denoising.
//!
//! Each network stage maps the current estimate `z` to
//! `P_C(z (1 - γ) + γ y - Lᵀ ψ(L z))`, where `L` is a non-local analysis
//! operator built from block-matched patch groups, `ψ` is a learned Gaussian
//! RBF shrinkage per transform coefficient and `P_C` clamps to the intensity
//! box. All parameters are trained with exact analytic gradients and L-BFGS.

pub mod error;
pub mod image;
pub mod network;
pub mod nonlocal;
pub mod patch;
pub mod pnm;
pub mod rbf;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
