//! Seeded corpus of soft-edged elliptical blobs over textured noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SampleMeta, SegSample};
use crate::error::{Error, Result};
use crate::types::{ImageTensor, Mask};

pub const MIN_SYNTH_SIZE: usize = 32;

const MIN_FOREGROUND: f64 = 0.005;
const MAX_FOREGROUND: f64 = 0.30;
const CHANNEL_GAIN: [f64; 3] = [1.0, 0.85, 0.7];

/// Rotated ellipse in pixel coordinates; pixel centers sit at `i + 0.5`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Normalized radius of `(x, y)`: 1 on the boundary.
    pub fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        (u * u + v * v).sqrt()
    }

    pub fn contains_pixel(&self, px: usize, py: usize) -> bool {
        self.radius(px as f64 + 0.5, py as f64 + 0.5) <= 1.0
    }

    fn extent(&self) -> f64 {
        self.a.max(self.b)
    }
}

fn sample_blobs(rng: &mut ChaCha8Rng, size: usize) -> Vec<Ellipse> {
    let s = size as f64;
    let count = rng.random_range(1..=3);
    let mut blobs: Vec<Ellipse> = Vec::with_capacity(count);
    let mut attempts = 0;
    while blobs.len() < count && attempts < 200 {
        attempts += 1;
        let a = rng.random_range(0.08..0.22) * s;
        let b = rng.random_range(0.08..0.22) * s;
        let r = a.max(b) * 1.15 + 1.0;
        if 2.0 * r >= s {
            continue;
        }
        let e = Ellipse {
            cx: rng.random_range(r..s - r),
            cy: rng.random_range(r..s - r),
            a,
            b,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        let clear = blobs.iter().all(|o| {
            let d = ((e.cx - o.cx).powi(2) + (e.cy - o.cy).powi(2)).sqrt();
            d > 1.2 * (e.extent() + o.extent()) + 2.0
        });
        if clear {
            blobs.push(e);
        }
    }
    blobs
}

fn render(rng: &mut ChaCha8Rng, size: usize, blobs: &[Ellipse]) -> (ImageTensor, Mask) {
    let base = rng.random_range(0.1..0.3);
    let amp: Vec<f64> = blobs.iter().map(|_| rng.random_range(0.5..0.7)).collect();
    let (fx, fy, phase) = (
        rng.random_range(0.5..2.5),
        rng.random_range(0.5..2.5),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let n = size * size;
    let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-0.04..0.04)).collect();
    let mut intensity = vec![0.0; n];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let texture = 0.03 * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            let blob: f64 = blobs
                .iter()
                .zip(&amp)
                .map(|(e, a)| a * ((1.15 - e.radius(x as f64 + 0.5, y as f64 + 0.5)) / 0.3).clamp(0.0, 1.0))
                .sum();
            intensity[y * size + x] = base + texture + noise[y * size + x] + blob;
        }
    }
    // Quantized to 8 bits so the PNG corpus reloads bit-identically.
    let image = ImageTensor::from_fn(3, size, size, |c, y, x| {
        (intensity[y * size + x] * CHANNEL_GAIN[c] * 255.0).round().clamp(0.0, 255.0) / 255.0
    });
    let mask = Mask::from_fn(size, size, |x, y| blobs.iter().any(|e| e.contains_pixel(x, y)));
    (image, mask)
}

/// Per-sample stream so sample `i` does not depend on how many were generated before it.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Like [`gen_synthetic`], also returning the generating ellipses.
pub fn gen_synthetic_with_blobs(count: usize, size: usize, seed: u64) -> Result<Vec<(SegSample, Vec<Ellipse>)>> {
    if size < MIN_SYNTH_SIZE {
        return Err(Error::Config(format!("synthetic size {size} below the minimum {MIN_SYNTH_SIZE}")));
    }
    let total = (size * size) as f64;
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            loop {
                let blobs = sample_blobs(&mut rng, size);
                if blobs.is_empty() {
                    continue;
                }
                let (image, mask) = render(&mut rng, size, &blobs);
                let frac = mask.count() as f64 / total;
                if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
                    let sample = SegSample::new(image, mask, SampleMeta::synthetic(i))?;
                    return Ok((sample, blobs));
                }
            }
        })
        .collect()
}

/// `count` seeded `size²` samples with 1–3 blobs each.
pub fn gen_synthetic(count: usize, size: usize, seed: u64) -> Result<Vec<SegSample>> {
    Ok(gen_synthetic_with_blobs(count, size, seed)?.into_iter().map(|(s, _)| s).collect())
}
