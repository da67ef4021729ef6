//! Procedural 8-bit frames with a chosen Laplacian variance.

use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::keyframe::{laplacian_variance, GrayFrame};
use crate::rng::Rng;

/// Square 8-bit grayscale frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedFrame {
    pub side: usize,
    pub bytes: Vec<u8>,
}

impl PackedFrame {
    pub fn to_gray(&self) -> GrayFrame {
        GrayFrame::new(
            self.side,
            self.side,
            self.bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .expect("packed frames are valid")
    }

    pub fn from_gray(f: &GrayFrame) -> Option<Self> {
        if f.width() != f.height() {
            return None;
        }
        let bytes: Vec<u8> = f.pixels().iter().map(|v| (v * 255.0).round() as u8).collect();
        let back = PackedFrame { side: f.width(), bytes };
        (back.to_gray() == *f).then_some(back)
    }

    pub fn variance(&self) -> f64 {
        laplacian_variance(&self.to_gray())
    }
}

fn box_blur(x: &[f64], side: usize) -> Vec<f64> {
    let at = |i: isize, j: isize| {
        let c = |v: isize| v.clamp(0, side as isize - 1) as usize;
        x[c(j) * side + c(i)]
    };
    let mut out = vec![0.0; x.len()];
    for j in 0..side as isize {
        for i in 0..side as isize {
            let mut s = 0.0;
            for dj in -1..=1 {
                for di in -1..=1 {
                    s += at(i + di, j + dj);
                }
            }
            out[j as usize * side + i as usize] = s / 9.0;
        }
    }
    out
}

/// Laplacian variance of raw values, unscaled.
fn raw_variance(x: &[f64], side: usize) -> f64 {
    let mut sum = 0.0;
    let mut sq = 0.0;
    for y in 1..side - 1 {
        for i in 1..side - 1 {
            let r = x[y * side + i - 1] + x[y * side + i + 1] + x[(y - 1) * side + i] + x[(y + 1) * side + i]
                - 4.0 * x[y * side + i];
            sum += r;
            sq += r * r;
        }
    }
    let n = ((side - 2) * (side - 2)) as f64;
    let m = sum / n;
    sq / n - m * m
}

/// Renders a seeded noise texture, smoothed by box-filter passes, rescaled so
/// that its Laplacian variance on the `[0, 255]` scale is close to `target`,
/// then centred at mid-gray and quantized. Blurrier targets get more passes.
pub fn render_frame(target: f64, side: usize, rng: &mut Rng) -> Result<PackedFrame> {
    let mut x: Vec<f64> = (0..side * side).map(|_| StandardNormal.sample(rng)).collect();
    let passes = if target >= 100.0 { 1 } else { 2 };
    for _ in 0..passes {
        x = box_blur(&x, side);
    }
    let raw = raw_variance(&x, side);
    let c = if raw > 0.0 && target > 0.0 {
        target.sqrt() / (255.0 * raw.sqrt())
    } else {
        0.0
    };
    let bytes = x
        .iter()
        .map(|v| ((0.5 + c * v).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(PackedFrame { side, bytes })
}
