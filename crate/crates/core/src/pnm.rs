//! Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.
//!
//! Grayscale files load with samples in 0..255 (peak 255). Color files load
//! with samples scaled into 0..1 (peak 1) and stored channel-planar.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ImageTensor, COLOR_PEAK, GRAY_PEAK};

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                offset: start,
                message: format!("expected {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

/// Decodes an in-memory P5/P6 file.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Parse {
            offset: 0,
            message: "missing 'P' magic".into(),
        });
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "magic 'P{}' (only binary P5/P6 are supported)",
                other as char
            )))
        }
    };
    let mut rd = HeaderReader { bytes, pos: 2 };
    let width = rd.number("width")?;
    let height = rd.number("height")?;
    let maxval = rd.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {maxval} (only 255 is supported)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: rd.pos,
            message: "zero image dimension".into(),
        });
    }
    match bytes.get(rd.pos) {
        Some(b) if b.is_ascii_whitespace() => rd.pos += 1,
        _ => {
            return Err(Error::Parse {
                offset: rd.pos,
                message: "expected a single whitespace after maxval".into(),
            })
        }
    }
    let n = width * height;
    let payload = &bytes[rd.pos..];
    if payload.len() < n * channels {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!(
                "truncated pixel data: need {} bytes, found {}",
                n * channels,
                payload.len()
            ),
        });
    }
    if channels == 1 {
        let data = payload[..n].iter().map(|&b| f64::from(b)).collect();
        ImageTensor::new(height, width, 1, data, GRAY_PEAK)
    } else {
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[c * n + p] = f64::from(payload[3 * p + c]) / 255.0;
            }
        }
        ImageTensor::new(height, width, 3, data, COLOR_PEAK)
    }
}

#[inline]
fn quantize(v: f64, peak: f64) -> u8 {
    let scaled = v.clamp(0.0, peak) * (255.0 / peak);
    // f64::round is half-away-from-zero.
    scaled.round().clamp(0.0, 255.0) as u8
}

/// Encodes to P5 (1 channel) or P6 (3 channels), clamping to `[0, peak]`.
pub fn encode_pnm(img: &ImageTensor) -> Vec<u8> {
    let (h, w, n) = (img.height(), img.width(), img.pixels());
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(n * img.channels());
    if img.channels() == 1 {
        out.extend(img.data().iter().map(|&v| quantize(v, img.peak())));
    } else {
        for p in 0..n {
            for c in 0..3 {
                out.push(quantize(img.plane(c)[p], img.peak()));
            }
        }
    }
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes)
}

pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}
