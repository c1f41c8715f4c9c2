//! Patch extraction, its adjoint, and block matching.
//!
//! Patches are taken with stride one around every pixel of the symmetrically
//! padded image, so there are exactly `R = height * width` patches. Patch `r`
//! is centered on the pixel with row-major index `r`. Inside a patch the
//! samples are listed column-major: entry `e = dc * patch_rows + dr`.

use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{reflect_index, ImageTensor, Margins, GRAY_PEAK};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    /// Patch height in pixels.
    pub patch_rows: usize,
    /// Patch width in pixels.
    pub patch_cols: usize,
    /// Side of the square search window, odd.
    pub window: usize,
    /// Group size K, including the reference patch.
    pub group_size: usize,
}

impl PatchGeometry {
    pub fn new(
        patch_rows: usize,
        patch_cols: usize,
        window: usize,
        group_size: usize,
    ) -> Result<Self> {
        let g = Self {
            patch_rows,
            patch_cols,
            window,
            group_size,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_rows == 0 || self.patch_cols == 0 {
            return Err(Error::invalid("patch dimensions must be >= 1"));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "search window must be odd and >= 1, got {}",
                self.window
            )));
        }
        if self.group_size == 0 || self.group_size > self.window * self.window {
            return Err(Error::invalid(format!(
                "group size {} must lie in 1..={}",
                self.group_size,
                self.window * self.window
            )));
        }
        Ok(())
    }

    /// Samples per patch, `P`.
    pub fn patch_len(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    /// Pad margins that make every pixel a patch center.
    pub fn margins(&self) -> Margins {
        let top = (self.patch_rows - 1) / 2;
        let left = (self.patch_cols - 1) / 2;
        Margins {
            top,
            bottom: self.patch_rows - 1 - top,
            left,
            right: self.patch_cols - 1 - left,
        }
    }

    /// Guaranteed candidate count of the clipped window at an image corner,
    /// excluding the reference itself.
    pub fn min_candidates(&self, height: usize, width: usize) -> usize {
        let half = self.window / 2;
        (half + 1).min(height) * (half + 1).min(width) - 1
    }

    pub(crate) fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let m = self.margins();
        if m.top.max(m.bottom) >= height || m.left.max(m.right) >= width {
            return Err(Error::invalid(format!(
                "image {height}x{width} is too small for {}x{} patches",
                self.patch_rows, self.patch_cols
            )));
        }
        Ok(())
    }
}

/// For every patch, the source pixel (in the unpadded image) of each entry.
///
/// This folds the symmetric padding into the gather, so `gather` is
/// `extract_patches ∘ symmetric_pad` and `scatter` is its exact adjoint.
#[derive(Debug, Clone)]
pub struct PatchIndex {
    height: usize,
    width: usize,
    patch_len: usize,
    src: Vec<u32>,
}

impl PatchIndex {
    pub fn new(height: usize, width: usize, geom: &PatchGeometry) -> Result<Self> {
        geom.check_dims(height, width)?;
        let m = geom.margins();
        let p = geom.patch_len();
        let mut src = Vec::with_capacity(height * width * p);
        for i in 0..height {
            for j in 0..width {
                for dc in 0..geom.patch_cols {
                    let sj = reflect_index(j as isize + dc as isize - m.left as isize, width);
                    for dr in 0..geom.patch_rows {
                        let si = reflect_index(i as isize + dr as isize - m.top as isize, height);
                        src.push((si * width + sj) as u32);
                    }
                }
            }
        }
        Ok(Self {
            height,
            width,
            patch_len: p,
            src,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch_count(&self) -> usize {
        self.height * self.width
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    /// Source pixels of patch `r`.
    pub fn sources(&self, r: usize) -> &[u32] {
        &self.src[r * self.patch_len..(r + 1) * self.patch_len]
    }

    /// `R x P` matrix of patch samples of a single plane.
    pub fn gather(&self, plane: &[f64]) -> Array2<f64> {
        assert_eq!(plane.len(), self.patch_count());
        let p = self.patch_len;
        let mut out = Array2::zeros((self.patch_count(), p));
        out.as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(p)
            .zip(self.src.par_chunks(p))
            .for_each(|(row, idx)| {
                for (v, &s) in row.iter_mut().zip(idx) {
                    *v = plane[s as usize];
                }
            });
        out
    }

    /// Adjoint of [`gather`](Self::gather): scatter-adds every entry back onto
    /// its source pixel. Runs serially in patch order, so the result is
    /// bit-reproducible.
    pub fn scatter(&self, patches: &Array2<f64>) -> Vec<f64> {
        assert_eq!(patches.dim(), (self.patch_count(), self.patch_len));
        let mut out = vec![0.0; self.patch_count()];
        for (row, idx) in patches
            .rows()
            .into_iter()
            .zip(self.src.chunks(self.patch_len))
        {
            for (v, &s) in row.iter().zip(idx) {
                out[s as usize] += *v;
            }
        }
        out
    }
}

/// Extracts all valid stride-one patches of an already padded single-channel
/// image. For an image padded with `geom.margins()` this yields one row per
/// pixel of the original image.
pub fn extract_patches(padded: &ImageTensor, geom: &PatchGeometry) -> Result<Array2<f64>> {
    padded.require_single_channel()?;
    let (hp, wp) = (padded.height(), padded.width());
    if hp < geom.patch_rows || wp < geom.patch_cols {
        return Err(Error::invalid("image smaller than one patch"));
    }
    let rows = hp - geom.patch_rows + 1;
    let cols = wp - geom.patch_cols + 1;
    let x = padded.data();
    let mut out = Array2::zeros((rows * cols, geom.patch_len()));
    for i in 0..rows {
        for j in 0..cols {
            let mut row = out.row_mut(i * cols + j);
            for dc in 0..geom.patch_cols {
                for dr in 0..geom.patch_rows {
                    row[dc * geom.patch_rows + dr] = x[(i + dr) * wp + j + dc];
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of `extract_patches ∘ symmetric_pad(geom.margins())` for an
/// output of `height x width`. The returned image uses the grayscale peak.
pub fn accumulate_patches(
    patches: &Array2<f64>,
    geom: &PatchGeometry,
    height: usize,
    width: usize,
) -> Result<ImageTensor> {
    if patches.dim() != (height * width, geom.patch_len()) {
        return Err(Error::invalid(format!(
            "patch matrix {:?} does not match {height}x{width} with {} samples per patch",
            patches.dim(),
            geom.patch_len()
        )));
    }
    let index = PatchIndex::new(height, width, geom)?;
    ImageTensor::gray(height, width, index.scatter(patches))
}

/// For each patch, the ordered indices of its group; the first entry of
/// group `r` is always `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndexSet {
    group_size: usize,
    indices: Vec<u32>,
}

impl GroupIndexSet {
    pub fn new(group_size: usize, indices: Vec<u32>) -> Result<Self> {
        let set = Self {
            group_size,
            indices,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.group_size;
        if k == 0 || !self.indices.len().is_multiple_of(k) {
            return Err(Error::invalid("group index length is not a multiple of K"));
        }
        let r_count = self.indices.len() / k;
        for (r, g) in self.indices.chunks(k).enumerate() {
            if g[0] as usize != r {
                return Err(Error::invalid(format!(
                    "group {r} does not start with itself"
                )));
            }
            for (a, &ia) in g.iter().enumerate() {
                if ia as usize >= r_count {
                    return Err(Error::invalid(format!("group {r} index {ia} out of range")));
                }
                if g[..a].contains(&ia) {
                    return Err(Error::invalid(format!("group {r} repeats index {ia}")));
                }
            }
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    /// Number of patches `R`.
    pub fn len(&self) -> usize {
        self.indices.len() / self.group_size
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn group(&self, r: usize) -> &[u32] {
        &self.indices[r * self.group_size..(r + 1) * self.group_size]
    }

    pub fn groups(&self) -> std::slice::ChunksExact<'_, u32> {
        self.indices.chunks_exact(self.group_size)
    }

    /// Debug export, one line `r,i_1,...,i_K` per patch.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (r, g) in self.groups().enumerate() {
            let _ = write!(s, "{r}");
            for i in g {
                let _ = write!(s, ",{i}");
            }
            s.push('\n');
        }
        s
    }
}

/// Groups every patch with its `K - 1` nearest neighbours (squared Euclidean
/// distance between patch vectors) among the patch centers inside the
/// clipped search window. Ties go to the smaller linear index.
pub fn block_match(img: &ImageTensor, geom: &PatchGeometry) -> Result<GroupIndexSet> {
    img.require_single_channel()?;
    geom.validate()?;
    let (h, w) = (img.height(), img.width());
    let k = geom.group_size;
    if geom.min_candidates(h, w) < k - 1 {
        return Err(Error::invalid(format!(
            "window {} offers only {} candidates at the border, need {}",
            geom.window,
            geom.min_candidates(h, w),
            k - 1
        )));
    }
    let index = PatchIndex::new(h, w, geom)?;
    let patches = index.gather(img.data());
    let patches = patches.as_slice().expect("standard layout");
    let p = geom.patch_len();
    let half = geom.window / 2;

    let groups: Vec<Vec<u32>> = (0..h * w)
        .into_par_iter()
        .map(|r| {
            let mut group = Vec::with_capacity(k);
            group.push(r as u32);
            if k == 1 {
                return group;
            }
            let (ri, rj) = (r / w, r % w);
            let reference = &patches[r * p..(r + 1) * p];
            let mut cands: Vec<(f64, u32)> = Vec::with_capacity(geom.window * geom.window);
            for ci in ri.saturating_sub(half)..(ri + half + 1).min(h) {
                for cj in rj.saturating_sub(half)..(rj + half + 1).min(w) {
                    let c = ci * w + cj;
                    if c == r {
                        continue;
                    }
                    let d: f64 = reference
                        .iter()
                        .zip(&patches[c * p..(c + 1) * p])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    cands.push((d, c as u32));
                }
            }
            let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            let need = k - 1;
            if cands.len() > need {
                cands.select_nth_unstable_by(need - 1, cmp);
                cands.truncate(need);
            }
            cands.sort_unstable_by(cmp);
            group.extend(cands.iter().map(|c| c.1));
            group
        })
        .collect();

    Ok(GroupIndexSet {
        group_size: k,
        indices: groups.into_iter().flatten().collect(),
    })
}

/// Single-channel image with grayscale peak, used by tests and helpers.
pub(crate) fn plane_image(height: usize, width: usize, data: Vec<f64>) -> Result<ImageTensor> {
    ImageTensor::new(height, width, 1, data, GRAY_PEAK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{symmetric_pad, GaussianStream};
    use proptest::prelude::*;

    fn random_plane(h: usize, w: usize, seed: u64) -> Vec<f64> {
        let mut s = GaussianStream::new(seed);
        (0..h * w).map(|_| 255.0 * s.next_uniform()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn geometry_validation() {
        assert!(PatchGeometry::new(5, 5, 8, 4).is_err());
        assert!(PatchGeometry::new(0, 5, 7, 4).is_err());
        assert!(PatchGeometry::new(5, 5, 3, 10).is_err());
        assert!(PatchGeometry::new(5, 5, 3, 9).is_ok());
    }

    #[test]
    fn unit_patch_is_identity() {
        let g = PatchGeometry::new(1, 1, 3, 1).unwrap();
        let x = plane_image(3, 4, random_plane(3, 4, 1)).unwrap();
        let e = extract_patches(&x, &g).unwrap();
        assert_eq!(e.as_slice().unwrap(), x.data());
        let back = accumulate_patches(&e, &g, 3, 4).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let g = PatchGeometry::new(3, 3, 3, 1).unwrap();
        let x = plane_image(4, 4, vec![7.5; 16]).unwrap();
        let e = extract_patches(&symmetric_pad(&x, g.margins()).unwrap(), &g).unwrap();
        assert_eq!(e.dim(), (16, 9));
        assert!(e.iter().all(|&v| v == 7.5));
    }

    #[test]
    fn ramp_patches_match_offset_table() {
        let g = PatchGeometry::new(3, 3, 3, 1).unwrap();
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let img = plane_image(4, 4, x.clone()).unwrap();
        let e = extract_patches(&symmetric_pad(&img, g.margins()).unwrap(), &g).unwrap();
        // Explicit (row, col) offsets in column-major patch order.
        let offsets: [(isize, isize); 9] = [
            (-1, -1),
            (0, -1),
            (1, -1),
            (-1, 0),
            (0, 0),
            (1, 0),
            (-1, 1),
            (0, 1),
            (1, 1),
        ];
        let mirror = |v: isize| -> usize {
            if v < 0 {
                0
            } else if v > 3 {
                3
            } else {
                v as usize
            }
        };
        for i in 0..4isize {
            for j in 0..4isize {
                let r = (i * 4 + j) as usize;
                for (e_idx, (di, dj)) in offsets.iter().enumerate() {
                    let v = x[mirror(i + di) * 4 + mirror(j + dj)];
                    assert_eq!(e[[r, e_idx]], v);
                }
            }
        }
        // The precomputed index agrees with pad-then-extract.
        let idx = PatchIndex::new(4, 4, &g).unwrap();
        assert_eq!(idx.gather(&x), e);
    }

    #[test]
    fn zero_patches_accumulate_to_zero() {
        let g = PatchGeometry::new(3, 3, 3, 1).unwrap();
        let out = accumulate_patches(&Array2::zeros((16, 9)), &g, 4, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(accumulate_patches(&Array2::zeros((15, 9)), &g, 4, 4).is_err());
    }

    #[test]
    fn accumulate_is_adjoint_on_8x8() {
        let g = PatchGeometry::new(5, 5, 3, 1).unwrap();
        let idx = PatchIndex::new(8, 8, &g).unwrap();
        let mut s = GaussianStream::new(2);
        for _ in 0..200 {
            let x: Vec<f64> = (0..64).map(|_| s.next_normal()).collect();
            let q = Array2::from_shape_fn((64, 25), |_| s.next_normal());
            let ex = idx.gather(&x);
            let lhs: f64 = ex.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
            let aq = accumulate_patches(&q, &g, 8, 8).unwrap();
            let rhs = dot(&x, aq.data());
            let nx = dot(&x, &x).sqrt();
            let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((lhs - rhs).abs() <= 1e-10 * nx * nq);
        }
    }

    fn exhaustive_groups(x: &[f64], h: usize, w: usize, g: &PatchGeometry) -> Vec<u32> {
        // Pad, extract by hand, sort every window candidate by (distance, index).
        let img = plane_image(h, w, x.to_vec()).unwrap();
        let e = extract_patches(&symmetric_pad(&img, g.margins()).unwrap(), g).unwrap();
        let half = (g.window / 2) as isize;
        let mut out = Vec::new();
        for r in 0..h * w {
            let (ri, rj) = ((r / w) as isize, (r % w) as isize);
            let mut all = Vec::new();
            for c in 0..h * w {
                let (ci, cj) = ((c / w) as isize, (c % w) as isize);
                if c == r || (ci - ri).abs() > half || (cj - rj).abs() > half {
                    continue;
                }
                let d: f64 = (0..g.patch_len())
                    .map(|k| (e[[r, k]] - e[[c, k]]).powi(2))
                    .sum();
                all.push((d, c as u32));
            }
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            out.push(r as u32);
            out.extend(all.iter().take(g.group_size - 1).map(|c| c.1));
        }
        out
    }

    #[test]
    fn block_match_matches_exhaustive_oracle() {
        let g = PatchGeometry::new(5, 5, 7, 4).unwrap();
        for seed in 0..3 {
            let x = random_plane(12, 12, seed);
            let got = block_match(&plane_image(12, 12, x.clone()).unwrap(), &g).unwrap();
            assert_eq!(got.indices, exhaustive_groups(&x, 12, 12, &g));
        }
    }

    #[test]
    fn block_match_constant_image_uses_index_order() {
        let g = PatchGeometry::new(3, 3, 5, 4).unwrap();
        let got = block_match(&plane_image(6, 6, vec![3.0; 36]).unwrap(), &g).unwrap();
        assert_eq!(got.indices, exhaustive_groups(&[3.0; 36], 6, 6, &g));
        // Pixel (2,2) = 14: window rows 0..=4, smallest indices excluding 14.
        assert_eq!(got.group(14), &[14, 0, 1, 2]);
        assert_eq!(got.group(0), &[0, 1, 2, 6]);
    }

    #[test]
    fn block_match_k1_is_reference_only() {
        let g = PatchGeometry::new(3, 3, 3, 1).unwrap();
        let got = block_match(&plane_image(5, 5, random_plane(5, 5, 4)).unwrap(), &g).unwrap();
        for (r, grp) in got.groups().enumerate() {
            assert_eq!(grp, &[r as u32]);
        }
    }

    #[test]
    fn block_match_rejects_small_window() {
        let g = PatchGeometry::new(3, 3, 3, 6).unwrap();
        assert!(block_match(&plane_image(6, 6, vec![0.0; 36]).unwrap(), &g).is_err());
    }

    #[test]
    fn csv_export() {
        let set = GroupIndexSet::new(2, vec![0, 1, 1, 0]).unwrap();
        assert_eq!(set.to_csv(), "0,0,1\n1,1,0\n");
        assert!(GroupIndexSet::new(2, vec![1, 0, 1, 0]).is_err());
        assert!(GroupIndexSet::new(2, vec![0, 0, 1, 0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn groups_satisfy_invariants(seed in any::<u64>(), h in 4usize..10, w in 4usize..10, k in 1usize..6) {
            let g = PatchGeometry::new(3, 3, 5, k).unwrap();
            let set = block_match(&plane_image(h, w, random_plane(h, w, seed)).unwrap(), &g).unwrap();
            prop_assert!(set.validate().is_ok());
            prop_assert_eq!(set.len(), h * w);
        }

        #[test]
        fn groups_invariant_to_offset_and_scale(seed in any::<u64>(), shift in -50.0f64..50.0, scale in 0.5f64..4.0) {
            let g = PatchGeometry::new(3, 3, 5, 4).unwrap();
            // Integer-valued samples keep the shifted/scaled distances exact.
            let x: Vec<f64> = random_plane(7, 7, seed).iter().map(|v| v.floor()).collect();
            let base = block_match(&plane_image(7, 7, x.clone()).unwrap(), &g).unwrap();
            let shift = shift.round();
            let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
            prop_assert_eq!(&base, &block_match(&plane_image(7, 7, shifted).unwrap(), &g).unwrap());
            let scale = (scale * 4.0).round() / 4.0;
            let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
            prop_assert_eq!(&base, &block_match(&plane_image(7, 7, scaled).unwrap(), &g).unwrap());
        }

        #[test]
        fn pad_is_linear_and_keeps_interior(seed in any::<u64>(), m in 0usize..3) {
            let x = random_plane(4, 5, seed);
            let y = random_plane(4, 5, seed ^ 0x55);
            let px = symmetric_pad(&plane_image(4, 5, x.clone()).unwrap(), Margins::uniform(m)).unwrap();
            let py = symmetric_pad(&plane_image(4, 5, y.clone()).unwrap(), Margins::uniform(m)).unwrap();
            let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - b).collect();
            let psum = symmetric_pad(&plane_image(4, 5, sum).unwrap(), Margins::uniform(m)).unwrap();
            for i in 0..psum.data().len() {
                prop_assert!((psum.data()[i] - (2.0 * px.data()[i] - py.data()[i])).abs() < 1e-9);
            }
            let w = 5 + 2 * m;
            let interior: f64 = (0..4).flat_map(|i| (0..5).map(move |j| (i + m) * w + j + m))
                .map(|k| px.data()[k].abs()).sum();
            let original: f64 = x.iter().map(|v| v.abs()).sum();
            prop_assert!((interior - original).abs() < 1e-9);
        }
    }
}
