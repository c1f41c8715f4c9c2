//! Losses, gradients and the training loops.

pub mod backward;
pub mod gradcheck;
pub mod lbfgs;
pub mod loss;
pub mod params;
pub mod schedule;
