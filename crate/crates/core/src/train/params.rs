//! Flat parameter vectors for the optimizer.
//!
//! Per stage the order is `γ`, `F` (row-major), `w`, then `π` in mixture
//! order (channel, coefficient, kernel). Stages follow one another.

use crate::error::{Error, Result};
use crate::network::{Model, StageParams};
use crate::train::backward::StageGrads;

pub fn flatten_stage(sp: &StageParams, out: &mut Vec<f64>) {
    out.push(sp.gamma);
    out.extend(sp.transform.matrix().iter());
    out.extend(&sp.weights.0);
    out.extend(sp.mixture.weights());
}

pub fn flatten_stage_grads(g: &StageGrads, out: &mut Vec<f64>) {
    out.push(g.d_gamma);
    out.extend(g.d_f.iter());
    out.extend(&g.d_w);
    out.extend(&g.d_pi);
}

/// Overwrites `sp` from `theta`, returning the number of values consumed.
pub fn unflatten_stage(sp: &mut StageParams, theta: &[f64]) -> Result<usize> {
    let n = sp.param_count();
    if theta.len() < n {
        return Err(Error::invalid(format!(
            "parameter vector too short: need {n}, have {}",
            theta.len()
        )));
    }
    let mut it = theta[..n].iter().copied();
    sp.gamma = it.next().expect("length checked");
    for v in sp.transform.matrix_mut().iter_mut() {
        *v = it.next().expect("length checked");
    }
    for v in sp.weights.0.iter_mut() {
        *v = it.next().expect("length checked");
    }
    for v in sp.mixture.weights_mut() {
        *v = it.next().expect("length checked");
    }
    Ok(n)
}

pub fn flatten_model(model: &Model) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.param_count());
    for sp in &model.stages {
        flatten_stage(sp, &mut out);
    }
    out
}

pub fn flatten_grads(grads: &[StageGrads]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        flatten_stage_grads(g, &mut out);
    }
    out
}

/// Writes `theta` into every stage of `model`. The length must match exactly.
pub fn unflatten_model(model: &mut Model, theta: &[f64]) -> Result<()> {
    if theta.len() != model.param_count() {
        return Err(Error::invalid(format!(
            "expected {} parameters, got {}",
            model.param_count(),
            theta.len()
        )));
    }
    let mut at = 0;
    for sp in &mut model.stages {
        at += unflatten_stage(sp, &theta[at..])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ColorMode;
    use crate::patch::PatchGeometry;
    use crate::rbf::RbfGrid;

    fn model(mode: ColorMode) -> Model {
        let geom = PatchGeometry::new(3, 3, 5, 3).unwrap();
        let grid = RbfGrid::new(9, mode.default_delta(), None).unwrap();
        Model::initial(2, geom, mode, grid, 25.0).unwrap()
    }

    #[test]
    fn round_trip_and_layout() {
        for mode in [ColorMode::Gray, ColorMode::Color] {
            let mut m = model(mode);
            let theta: Vec<f64> = (0..m.param_count()).map(|i| i as f64 * 0.5).collect();
            unflatten_model(&mut m, &theta).unwrap();
            assert_eq!(flatten_model(&m), theta);
            let s0 = &m.stages[0];
            assert_eq!(s0.gamma, 0.0);
            assert_eq!(s0.transform.matrix()[[0, 1]], 1.0);
            let f_len = 8 * 9;
            assert_eq!(s0.weights.0[0], (1 + f_len) as f64 * 0.5);
            assert_eq!(s0.mixture.weights()[0], (1 + f_len + 3) as f64 * 0.5);
            assert_eq!(m.stages[1].gamma, s0.param_count() as f64 * 0.5);
        }
    }

    #[test]
    fn wrong_length_rejected() {
        let mut m = model(ColorMode::Gray);
        let n = m.param_count();
        assert!(unflatten_model(&mut m, &vec![0.0; n - 1]).is_err());
        assert!(unflatten_model(&mut m, &vec![0.0; n + 1]).is_err());
    }
}
