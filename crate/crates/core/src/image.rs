//! Planar image container, padding, noise synthesis, color transforms and PSNR.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

/// Peak intensity used for grayscale images (samples live in 0..=255).
pub const GRAY_PEAK: f64 = 255.0;
/// Peak intensity used for color images (samples live in 0..=1).
pub const COLOR_PEAK: f64 = 1.0;

/// A channel-planar image. Each plane is stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    peak: f64,
}

impl ImageTensor {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
        peak: f64,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::invalid(format!("peak must be positive, got {peak}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            peak,
        })
    }

    /// Grayscale image with the 0..255 convention.
    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 1, data, GRAY_PEAK)
    }

    /// Three-channel image with the 0..1 convention.
    pub fn color(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 3, data, COLOR_PEAK)
    }

    pub fn zeros(height: usize, width: usize, channels: usize, peak: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
            peak,
        )
    }

    pub fn from_planes(
        height: usize,
        width: usize,
        planes: &[Vec<f64>],
        peak: f64,
    ) -> Result<Self> {
        let data = planes.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(height, width, planes.len(), data, peak)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn peak(&self) -> f64 {
        self.peak
    }

    /// Pixel count of a single plane.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn planes(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.pixels())
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Returns a copy carrying a different data buffer of the same shape.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, data, self.peak)
    }

    pub(crate) fn require_single_channel(&self) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::invalid(format!(
                "expected a single-channel image, got {} channels",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Parameters of additive white Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { sigma, seed })
    }
}

/// Pixel margins for [`symmetric_pad`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Margins {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Margins {
    pub fn uniform(m: usize) -> Self {
        Self {
            top: m,
            bottom: m,
            left: m,
            right: m,
        }
    }
}

/// Whole-sample mirror of a possibly out-of-range index: `-1 -> 0`, `n -> n-1`.
///
/// Valid for `-n <= i < 2n`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    debug_assert!((0..n).contains(&r));
    r as usize
}

/// Pads every plane by mirror reflection that repeats the edge pixel.
pub fn symmetric_pad(img: &ImageTensor, margins: Margins) -> Result<ImageTensor> {
    let (h, w) = (img.height, img.width);
    if margins.top >= h || margins.bottom >= h || margins.left >= w || margins.right >= w {
        return Err(Error::invalid(format!(
            "pad margins {margins:?} must be smaller than the image size {h}x{w}"
        )));
    }
    let ph = h + margins.top + margins.bottom;
    let pw = w + margins.left + margins.right;
    let mut data = Vec::with_capacity(ph * pw * img.channels);
    for plane in img.planes() {
        for i in 0..ph {
            let si = reflect_index(i as isize - margins.top as isize, h);
            for j in 0..pw {
                let sj = reflect_index(j as isize - margins.left as isize, w);
                data.push(plane[si * w + sj]);
            }
        }
    }
    ImageTensor::new(ph, pw, img.channels, data, img.peak)
}

/// Peak signal-to-noise ratio in decibels over all samples of all channels.
pub fn psnr(y: &ImageTensor, x: &ImageTensor) -> Result<f64> {
    if !y.same_shape(x) || y.peak != x.peak {
        return Err(Error::invalid("psnr: images differ in shape or peak"));
    }
    let sq: f64 = y
        .data
        .iter()
        .zip(&x.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if sq == 0.0 {
        return Err(Error::InfinitePsnr);
    }
    let n = y.data.len() as f64;
    Ok(20.0 * (y.peak * n.sqrt() / sq.sqrt()).log10())
}

/// Deterministic standard-normal stream.
///
/// Uniforms come from ChaCha20 seeded with `seed_from_u64(seed)`: each draw takes
/// one `u64`, keeps its top 53 bits `m`, and maps to `(m + 0.5) / 2^53` in (0, 1).
/// Pairs of uniforms `(u1, u2)` are turned into two normals with the Box–Muller
/// transform `sqrt(-2 ln u1) * (cos 2πu2, sin 2πu2)`, evaluated with the pure-Rust
/// `libm` routines so the stream does not depend on the platform math library.
pub struct GaussianStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn next_uniform(&mut self) -> f64 {
        let m = self.rng.next_u64() >> 11;
        (m as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}

/// Adds i.i.d. N(0, sigma^2) noise in storage order. No clamping is applied.
pub fn add_gaussian_noise(img: &ImageTensor, spec: NoiseSpec) -> ImageTensor {
    let mut out = img.clone();
    if spec.sigma == 0.0 {
        return out;
    }
    let mut stream = GaussianStream::new(spec.seed);
    for v in out.data.iter_mut() {
        *v += spec.sigma * stream.next_normal();
    }
    out
}

/// Rows of the forward opponent transform (luminance first).
pub const OPPONENT: [[f64; 3]; 3] = [
    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    [0.5, 0.0, -0.5],
    [0.25, -0.5, 0.25],
];

/// Rows of the inverse opponent transform.
pub const OPPONENT_INV: [[f64; 3]; 3] = [
    [1.0, 1.0, 2.0 / 3.0],
    [1.0, 0.0, -4.0 / 3.0],
    [1.0, -1.0, 2.0 / 3.0],
];

fn mix_channels(img: &ImageTensor, m: &[[f64; 3]; 3]) -> Result<ImageTensor> {
    if img.channels != 3 {
        return Err(Error::invalid(format!(
            "color transform needs 3 channels, got {}",
            img.channels
        )));
    }
    let n = img.pixels();
    let (a, b, c) = (img.plane(0), img.plane(1), img.plane(2));
    let mut data = vec![0.0; 3 * n];
    for (k, row) in m.iter().enumerate() {
        let out = &mut data[k * n..(k + 1) * n];
        for p in 0..n {
            out[p] = row[0] * a[p] + row[1] * b[p] + row[2] * c[p];
        }
    }
    img.with_data(data)
}

/// RGB to (O1, O2, O3) with O1 = (R+G+B)/3, O2 = (R-B)/2, O3 = (R-2G+B)/4.
pub fn rgb_to_opponent(img: &ImageTensor) -> Result<ImageTensor> {
    mix_channels(img, &OPPONENT)
}

pub fn opponent_to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    mix_channels(img, &OPPONENT_INV)
}

/// Pullback of a gradient through [`opponent_to_rgb`]: returns `Mᵀ g` for the
/// inverse matrix `M`.
pub fn opponent_to_rgb_adjoint(grad_rgb: &ImageTensor) -> Result<ImageTensor> {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in OPPONENT_INV.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    mix_channels(grad_rgb, &t)
}
