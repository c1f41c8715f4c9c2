//! Seeded synthetic test images: smooth shading with flat-colored shapes on
//! top, so they have both smooth regions and sharp edges.

use crate::image::{GaussianStream, ImageTensor, COLOR_PEAK, GRAY_PEAK};

enum Shape {
    Disc { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }
}

fn unit_planes(height: usize, width: usize, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut s = GaussianStream::new(seed);
    let (h, w) = (height as f64, width as f64);
    let mut shapes = Vec::new();
    for _ in 0..6 {
        let shape = if s.next_uniform() < 0.5 {
            Shape::Disc {
                cy: h * s.next_uniform(),
                cx: w * s.next_uniform(),
                r: 0.08 * h.min(w) + 0.2 * h.min(w) * s.next_uniform(),
            }
        } else {
            let (y0, x0) = (h * s.next_uniform(), w * s.next_uniform());
            Shape::Rect {
                y0,
                x0,
                y1: y0 + 0.1 * h + 0.4 * h * s.next_uniform(),
                x1: x0 + 0.1 * w + 0.4 * w * s.next_uniform(),
            }
        };
        let levels: Vec<f64> = (0..channels)
            .map(|_| 0.15 + 0.7 * s.next_uniform())
            .collect();
        shapes.push((shape, levels));
    }
    let slope: Vec<(f64, f64, f64)> = (0..channels)
        .map(|_| {
            (
                0.3 + 0.4 * s.next_uniform(),
                0.3 * (s.next_uniform() - 0.5),
                0.3 * (s.next_uniform() - 0.5),
            )
        })
        .collect();
    let freq = 0.05 + 0.1 * s.next_uniform();

    let mut planes = vec![Vec::with_capacity(height * width); channels];
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f64, c as f64);
            let top = shapes.iter().rev().find(|(sh, _)| sh.contains(y, x));
            for (ch, plane) in planes.iter_mut().enumerate() {
                let (base, gy, gx) = slope[ch];
                let v = match top {
                    Some((_, levels)) => levels[ch] + 0.03 * (freq * (x + y)).sin(),
                    None => {
                        base + gy * y / h + gx * x / w + 0.05 * (freq * x).sin() * (freq * y).cos()
                    }
                };
                plane.push(v.clamp(0.05, 0.95));
            }
        }
    }
    planes
}

/// Grayscale image on the 0..255 scale.
pub fn piecewise_smooth_gray(height: usize, width: usize, seed: u64) -> ImageTensor {
    let planes = unit_planes(height, width, 1, seed);
    let data = planes[0].iter().map(|v| (v * GRAY_PEAK).round()).collect();
    ImageTensor::gray(height, width, data).expect("shape is consistent")
}

/// RGB image on the 0..1 scale, quantized to multiples of 1/255.
pub fn piecewise_smooth_color(height: usize, width: usize, seed: u64) -> ImageTensor {
    let planes: Vec<Vec<f64>> = unit_planes(height, width, 3, seed)
        .into_iter()
        .map(|p| p.into_iter().map(|v| (v * 255.0).round() / 255.0).collect())
        .collect();
    ImageTensor::from_planes(height, width, &planes, COLOR_PEAK).expect("shape is consistent")
}
