//! The non-local analysis operator and its adjoint.
//!
//! For patch `r` with group `(i_{r,1}, ..., i_{r,K})` the operator returns
//! `z_r = sum_k w_k F x_{i_{r,k}}`, where `x_p` is the (padded) patch `p` and
//! `F` is the `(P-1) x P` patch transform. The adjoint scatters
//! `w_k Fᵀ z_r` back onto patch `i_{r,k}` and folds the padding.

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::patch::{GroupIndexSet, PatchGeometry, PatchIndex};

/// `R x F_c` transform-domain coefficients, one row per patch.
pub type CoeffField = Array2<f64>;

/// Non-redundant patch transform with the DC direction left out.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTransform {
    matrix: Array2<f64>,
}

impl PatchTransform {
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        let (rows, cols) = matrix.dim();
        if cols < 2 || rows + 1 != cols {
            return Err(Error::invalid(format!(
                "patch transform must be (P-1) x P, got {rows} x {cols}"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("patch transform has non-finite entries"));
        }
        Ok(Self { matrix })
    }

    /// Orthonormal 2-D DCT-II basis without its constant atom, in zig-zag
    /// order. Atoms are laid out column-major like the patches.
    pub fn dct(geom: &PatchGeometry) -> Result<Self> {
        let (pr, pc) = (geom.patch_rows, geom.patch_cols);
        if pr * pc < 2 {
            return Err(Error::invalid("a 1x1 patch has no non-DC coefficients"));
        }
        let basis = |n: usize, u: usize, t: usize| -> f64 {
            let scale = if u == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            scale * (std::f64::consts::PI * (2 * t + 1) as f64 * u as f64 / (2 * n) as f64).cos()
        };
        let mut freqs: Vec<(usize, usize)> = (0..pr)
            .flat_map(|u| (0..pc).map(move |v| (u, v)))
            .filter(|&f| f != (0, 0))
            .collect();
        // Zig-zag: by anti-diagonal, alternating direction along each one.
        freqs.sort_by_key(|&(u, v)| {
            let s = u + v;
            (s, if s % 2 == 1 { u } else { pr - u })
        });
        let mut m = Array2::zeros((freqs.len(), pr * pc));
        for (a, &(u, v)) in freqs.iter().enumerate() {
            for dc in 0..pc {
                for dr in 0..pr {
                    m[[a, dc * pr + dr]] = basis(pr, u, dr) * basis(pc, v, dc);
                }
            }
        }
        Self::new(m)
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<f64> {
        &mut self.matrix
    }

    /// Coefficient count `F_c = P - 1`.
    pub fn coeffs(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn patch_len(&self) -> usize {
        self.matrix.ncols()
    }
}

/// One scalar weight per group member, shared by all coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights(pub Vec<f64>);

impl GroupWeights {
    /// `w_1 = 1`, all others zero: a purely local start.
    pub fn local(k: usize) -> Self {
        let mut w = vec![0.0; k];
        w[0] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Borrowed view of everything that defines `L` for one image.
#[derive(Clone, Copy)]
pub struct NonLocalOp<'a> {
    pub index: &'a PatchIndex,
    pub transform: &'a PatchTransform,
    pub weights: &'a GroupWeights,
    pub groups: &'a GroupIndexSet,
}

impl<'a> NonLocalOp<'a> {
    pub fn new(
        index: &'a PatchIndex,
        transform: &'a PatchTransform,
        weights: &'a GroupWeights,
        groups: &'a GroupIndexSet,
    ) -> Result<Self> {
        if groups.len() != index.patch_count() {
            return Err(Error::invalid(format!(
                "group set covers {} patches, image has {}",
                groups.len(),
                index.patch_count()
            )));
        }
        if groups.group_size() != weights.len() {
            return Err(Error::invalid(format!(
                "group size {} does not match {} weights",
                groups.group_size(),
                weights.len()
            )));
        }
        if transform.patch_len() != index.patch_len() {
            return Err(Error::invalid(
                "patch transform width does not match the patch size",
            ));
        }
        Ok(Self {
            index,
            transform,
            weights,
            groups,
        })
    }

    pub fn coeffs(&self) -> usize {
        self.transform.coeffs()
    }

    /// `f_p = F x_p` for every patch.
    pub fn transform_patches(&self, plane: &[f64]) -> CoeffField {
        self.index.gather(plane).dot(&self.transform.matrix.t())
    }

    /// `z_r = sum_k w_k f_{i_{r,k}}`.
    pub fn group_sum(&self, f: &CoeffField) -> CoeffField {
        let mut z = Array2::zeros(f.dim());
        Zip::indexed(z.axis_iter_mut(Axis(0))).par_for_each(|r, mut zr| {
            for (&i, &wk) in self.groups.group(r).iter().zip(&self.weights.0) {
                if wk != 0.0 {
                    zr.scaled_add(wk, &f.row(i as usize));
                }
            }
        });
        z
    }

    /// Adjoint of [`group_sum`](Self::group_sum): `g_p = sum_{(r,k): i_{r,k} = p} w_k z_r`.
    /// Accumulates serially in `(r, k)` order.
    pub fn group_scatter(&self, z: &CoeffField) -> CoeffField {
        let mut g = Array2::zeros(z.dim());
        for (r, grp) in self.groups.groups().enumerate() {
            let zr = z.row(r);
            for (&i, &wk) in grp.iter().zip(&self.weights.0) {
                if wk != 0.0 {
                    g.row_mut(i as usize).scaled_add(wk, &zr);
                }
            }
        }
        g
    }

    /// Maps transform-domain rows back to patches and folds them into an image.
    pub fn synthesize(&self, g: &CoeffField) -> Vec<f64> {
        self.index.scatter(&g.dot(&self.transform.matrix))
    }

    pub fn forward(&self, plane: &[f64]) -> CoeffField {
        self.group_sum(&self.transform_patches(plane))
    }

    pub fn adjoint(&self, z: &CoeffField) -> Vec<f64> {
        self.synthesize(&self.group_scatter(z))
    }
}

/// Applies `L` to a single-channel image.
pub fn nl_forward(
    x: &ImageTensor,
    transform: &PatchTransform,
    weights: &GroupWeights,
    groups: &GroupIndexSet,
    geom: &PatchGeometry,
) -> Result<CoeffField> {
    x.require_single_channel()?;
    let index = PatchIndex::new(x.height(), x.width(), geom)?;
    let op = NonLocalOp::new(&index, transform, weights, groups)?;
    Ok(op.forward(x.data()))
}

/// Applies `Lᵀ`, returning a single-channel `height x width` image.
pub fn nl_adjoint(
    z: &CoeffField,
    transform: &PatchTransform,
    weights: &GroupWeights,
    groups: &GroupIndexSet,
    geom: &PatchGeometry,
    height: usize,
    width: usize,
) -> Result<ImageTensor> {
    let index = PatchIndex::new(height, width, geom)?;
    let op = NonLocalOp::new(&index, transform, weights, groups)?;
    if z.dim() != (index.patch_count(), transform.coeffs()) {
        return Err(Error::invalid(format!(
            "coefficient field {:?} does not match {} patches x {} coefficients",
            z.dim(),
            index.patch_count(),
            transform.coeffs()
        )));
    }
    crate::patch::plane_image(height, width, op.adjoint(z))
}
