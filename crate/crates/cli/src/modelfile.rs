//! Binary model files.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "NLNT"                       4 bytes
//! version                      u32 (currently 1)
//! mode                         u32 (0 grayscale, 1 color)
//! S, Px, Py, K, window, M      u32 each (Px = patch columns, Py = patch rows)
//! sigma_trained, delta, eps    f64 each
//! per stage: γ, F row-major ((P-1)·P), w (K), π (C·(P-1)·M)    f64 each
//! checksum                     u64, wrapping sum of every preceding byte
//! ```

use std::path::Path;

use ndarray::Array2;
use nlnet::network::{ColorMode, Model, StageParams};
use nlnet::nonlocal::{GroupWeights, PatchTransform};
use nlnet::patch::PatchGeometry;
use nlnet::rbf::{RbfGrid, RbfMixture};
use nlnet::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NLNT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 8 + 8 * 3;

fn checksum(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v)
        .map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit the model format")))
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let g = &model.geom;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.param_count() + 8);
    out.extend_from_slice(MAGIC);
    let mode = match model.mode {
        ColorMode::Gray => 0,
        ColorMode::Color => 1,
    };
    for v in [
        VERSION,
        mode,
        to_u32(model.stages.len(), "stage count")?,
        to_u32(g.patch_cols, "patch width")?,
        to_u32(g.patch_rows, "patch height")?,
        to_u32(g.group_size, "group size")?,
        to_u32(g.window, "window")?,
        to_u32(model.grid.kernels(), "kernel count")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [
        model.sigma_trained,
        model.grid.delta(),
        model.grid.epsilon(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for sp in &model.stages {
        let values = std::iter::once(sp.gamma)
            .chain(sp.transform.matrix().iter().copied())
            .chain(sp.weights.0.iter().copied())
            .chain(sp.mixture.weights().iter().copied());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let b = self.bytes[self.at..self.at + N]
            .try_into()
            .expect("length checked by caller");
        self.at += N;
        b
    }

    fn u32(&mut self) -> usize {
        u32::from_le_bytes(self.take()) as usize
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }

    fn f64s(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptModel(msg.into())
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < HEADER_LEN + 8 {
        return Err(corrupt(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if checksum(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, at: 4 };
    let version = r.u32() as u32;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mode = match r.u32() {
        0 => ColorMode::Gray,
        1 => ColorMode::Color,
        m => return Err(corrupt(format!("unknown mode flag {m}"))),
    };
    let (stages, px, py, k, window, m) = (r.u32(), r.u32(), r.u32(), r.u32(), r.u32(), r.u32());
    let (sigma, delta, epsilon) = (r.f64(), r.f64(), r.f64());

    let geom = PatchGeometry::new(py, px, window, k).map_err(|e| corrupt(e.to_string()))?;
    if stages == 0 {
        return Err(corrupt("no stages"));
    }
    let p = px * py;
    let c = mode.channels();
    let per_stage = 1 + (p - 1) * p + k + c * (p - 1) * m;
    let expected = stages
        .checked_mul(per_stage)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN));
    if expected != Some(body.len()) {
        return Err(corrupt(format!(
            "payload is {} bytes, header implies {}",
            body.len(),
            expected.map_or("an overflowing size".to_string(), |n| n.to_string())
        )));
    }
    let grid = RbfGrid::new(m, delta, Some(epsilon)).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(stages);
    for _ in 0..stages {
        let gamma = r.f64();
        let f =
            Array2::from_shape_vec((p - 1, p), r.f64s((p - 1) * p)).expect("size computed above");
        let transform = PatchTransform::new(f).map_err(|e| corrupt(e.to_string()))?;
        let weights = GroupWeights(r.f64s(k));
        let mixture = RbfMixture::new(grid.clone(), c, p - 1, r.f64s(c * (p - 1) * m))
            .map_err(|e| corrupt(e.to_string()))?;
        out.push(StageParams {
            gamma,
            transform,
            weights,
            mixture,
        });
    }
    let model = Model {
        stages: out,
        geom,
        mode,
        grid,
        sigma_trained: sigma,
    };
    model.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model)?).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_model(&bytes)
}
