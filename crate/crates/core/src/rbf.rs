//! Gaussian RBF mixtures parameterizing the per-coefficient shrinkage
//! functions `psi_i(x) = sum_j pi_ij exp(-eps (x - mu_j)^2)`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::nonlocal::CoeffField;

/// Number of samples used by [`fit_linear_init`].
pub const FIT_SAMPLES: usize = 512;

/// Kernels with `eps (x - mu)^2` above this are skipped; `exp(-46) < 1.1e-20`.
const CUTOFF_EXPONENT: f64 = 46.0;

/// Equispaced kernel centers over `[-delta, delta]` with one shared precision.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfGrid {
    centers: Vec<f64>,
    delta: f64,
    epsilon: f64,
    cutoff: f64,
}

impl RbfGrid {
    /// `epsilon = None` picks `ln 2 / h^2`, `h` being the center spacing.
    pub fn new(kernels: usize, delta: f64, epsilon: Option<f64>) -> Result<Self> {
        if kernels < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 kernels, got {kernels}"
            )));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::invalid(format!(
                "center span must be positive, got {delta}"
            )));
        }
        let h = 2.0 * delta / (kernels - 1) as f64;
        let epsilon = epsilon.unwrap_or(std::f64::consts::LN_2 / (h * h));
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "precision must be positive, got {epsilon}"
            )));
        }
        let centers = (0..kernels).map(|j| -delta + j as f64 * h).collect();
        Ok(Self {
            centers,
            delta,
            epsilon,
            cutoff: (CUTOFF_EXPONENT / epsilon).sqrt(),
        })
    }

    pub fn kernels(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn spacing(&self) -> f64 {
        self.centers[1] - self.centers[0]
    }

    /// Indices of the kernels that are not negligible at `x`. Every kernel
    /// outside contributes less than `1.1e-20` times its weight.
    #[inline]
    pub fn support(&self, x: f64) -> Range<usize> {
        let m = self.centers.len();
        if !x.is_finite() {
            return 0..m;
        }
        let h = self.spacing();
        let lo = ((x - self.cutoff + self.delta) / h).floor();
        let hi = ((x + self.cutoff + self.delta) / h).ceil() + 1.0;
        let lo = lo.clamp(0.0, m as f64) as usize;
        let hi = hi.clamp(0.0, m as f64) as usize;
        lo..hi.max(lo)
    }

    /// Writes `rho_j(x)` into `out` for the kernels in [`support`](Self::support)
    /// and zero elsewhere.
    #[inline]
    pub fn basis(&self, x: f64, out: &mut [f64]) {
        out.fill(0.0);
        for j in self.support(x) {
            let d = x - self.centers[j];
            out[j] = (-self.epsilon * d * d).exp();
        }
    }

    /// `psi(x)` for one coefficient row.
    #[inline]
    pub fn eval_row(&self, pi: &[f64], x: f64) -> f64 {
        let mut v = 0.0;
        for j in self.support(x) {
            let d = x - self.centers[j];
            v += pi[j] * (-self.epsilon * d * d).exp();
        }
        v
    }

    /// `(psi(x), psi'(x))` for one coefficient row.
    #[inline]
    pub fn eval_pair(&self, pi: &[f64], x: f64) -> (f64, f64) {
        let mut v = 0.0;
        let mut dv = 0.0;
        for j in self.support(x) {
            let d = x - self.centers[j];
            let g = pi[j] * (-self.epsilon * d * d).exp();
            v += g;
            dv += g * d;
        }
        (v, -2.0 * self.epsilon * dv)
    }
}

/// Mixture coefficients for every channel and transform coefficient, stored
/// channel-major, then coefficient, then kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct RbfMixture {
    grid: RbfGrid,
    channels: usize,
    coeffs: usize,
    pi: Vec<f64>,
}

impl RbfMixture {
    pub fn new(grid: RbfGrid, channels: usize, coeffs: usize, pi: Vec<f64>) -> Result<Self> {
        if channels == 0 || coeffs == 0 {
            return Err(Error::invalid(
                "mixture needs at least one channel and coefficient",
            ));
        }
        if pi.len() != channels * coeffs * grid.kernels() {
            return Err(Error::invalid(format!(
                "expected {} mixture weights, got {}",
                channels * coeffs * grid.kernels(),
                pi.len()
            )));
        }
        if pi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mixture weights must be finite"));
        }
        Ok(Self {
            grid,
            channels,
            coeffs,
            pi,
        })
    }

    pub fn zeros(grid: RbfGrid, channels: usize, coeffs: usize) -> Result<Self> {
        let n = channels * coeffs * grid.kernels();
        Self::new(grid, channels, coeffs, vec![0.0; n])
    }

    /// Every coefficient row of every channel set to `row`.
    pub fn repeated(grid: RbfGrid, channels: usize, coeffs: usize, row: &[f64]) -> Result<Self> {
        if row.len() != grid.kernels() {
            return Err(Error::invalid("row length differs from kernel count"));
        }
        let pi = row.repeat(channels * coeffs);
        Self::new(grid, channels, coeffs, pi)
    }

    pub fn grid(&self) -> &RbfGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coeffs(&self) -> usize {
        self.coeffs
    }

    pub fn weights(&self) -> &[f64] {
        &self.pi
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.pi
    }

    /// Mixture weights of one channel as a `coeffs x kernels` block.
    pub fn channel_weights(&self, channel: usize) -> &[f64] {
        let n = self.coeffs * self.grid.kernels();
        &self.pi[channel * n..(channel + 1) * n]
    }

    pub fn row(&self, channel: usize, coeff: usize) -> &[f64] {
        let m = self.grid.kernels();
        let start = (channel * self.coeffs + coeff) * m;
        &self.pi[start..start + m]
    }

    fn check(&self, channel: usize, coeff: usize) -> Result<()> {
        if channel >= self.channels || coeff >= self.coeffs {
            return Err(Error::invalid(format!(
                "mixture index ({channel}, {coeff}) out of range ({}, {})",
                self.channels, self.coeffs
            )));
        }
        Ok(())
    }

    pub fn eval(&self, channel: usize, coeff: usize, x: f64) -> Result<f64> {
        self.check(channel, coeff)?;
        Ok(self.grid.eval_row(self.row(channel, coeff), x))
    }

    pub fn deriv(&self, channel: usize, coeff: usize, x: f64) -> Result<f64> {
        self.check(channel, coeff)?;
        Ok(self.grid.eval_pair(self.row(channel, coeff), x).1)
    }

    fn check_field(&self, channel: usize, z: &CoeffField) -> Result<()> {
        if channel >= self.channels {
            return Err(Error::invalid(format!("channel {channel} out of range")));
        }
        if z.ncols() != self.coeffs {
            return Err(Error::invalid(format!(
                "field has {} columns, mixture has {} coefficients",
                z.ncols(),
                self.coeffs
            )));
        }
        Ok(())
    }

    /// Entrywise `psi_i(z_ri)` with column `i` using mixture row `i`.
    pub fn apply_psi(&self, channel: usize, z: &CoeffField) -> Result<CoeffField> {
        self.check_field(channel, z)?;
        let mut v = Array2::zeros(z.dim());
        Zip::from(v.axis_iter_mut(Axis(0)))
            .and(z.axis_iter(Axis(0)))
            .par_for_each(|mut vr, zr| {
                for i in 0..zr.len() {
                    vr[i] = self.grid.eval_row(self.row(channel, i), zr[i]);
                }
            });
        Ok(v)
    }

    /// Entrywise `psi_i'(z_ri)`.
    pub fn apply_psi_deriv(&self, channel: usize, z: &CoeffField) -> Result<CoeffField> {
        Ok(self.apply_psi_pair(channel, z)?.1)
    }

    /// Both the values and the derivatives in one pass.
    pub fn apply_psi_pair(
        &self,
        channel: usize,
        z: &CoeffField,
    ) -> Result<(CoeffField, CoeffField)> {
        self.check_field(channel, z)?;
        let mut v = Array2::zeros(z.dim());
        let mut dv = Array2::zeros(z.dim());
        Zip::from(v.axis_iter_mut(Axis(0)))
            .and(dv.axis_iter_mut(Axis(0)))
            .and(z.axis_iter(Axis(0)))
            .par_for_each(|mut vr, mut dr, zr| {
                for i in 0..zr.len() {
                    let (a, b) = self.grid.eval_pair(self.row(channel, i), zr[i]);
                    vr[i] = a;
                    dr[i] = b;
                }
            });
        Ok((v, dv))
    }
}

/// Least-squares mixture weights reproducing `slope * x` on
/// [`FIT_SAMPLES`] equispaced points of `[-delta, delta]`.
pub fn fit_linear_init(grid: &RbfGrid, slope: f64) -> Result<Vec<f64>> {
    let m = grid.kernels();
    let n = FIT_SAMPLES;
    let xs: Vec<f64> = (0..n)
        .map(|s| -grid.delta + 2.0 * grid.delta * s as f64 / (n - 1) as f64)
        .collect();
    let mut a = DMatrix::zeros(n, m);
    let mut row = vec![0.0; m];
    for (s, &x) in xs.iter().enumerate() {
        grid.basis(x, &mut row);
        for j in 0..m {
            a[(s, j)] = row[j];
        }
    }
    let b = DVector::from_iterator(n, xs.iter().map(|&x| slope * x));
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-12) {
        return Err(Error::Numeric {
            iteration: 0,
            step: 0.0,
            message: format!("RBF fit is rank deficient (singular values {smin:e}..{smax:e})"),
        });
    }
    let sol = svd.solve(&b, 0.0).map_err(|e| Error::Numeric {
        iteration: 0,
        step: 0.0,
        message: e.to_string(),
    })?;
    Ok(sol.iter().copied().collect())
}
