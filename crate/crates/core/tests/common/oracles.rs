//! Slow, obviously-correct reference computations.

use boxadapt_core::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(name, flat index)` pairs: 4 hfa, 4 msfa, 3 selector decision entries,
/// both entries of the first selector bias, and 7 decoder entries.
pub fn gradient_sample(model: &Model, n: usize, seed: u64) -> Vec<(String, usize)> {
    assert_eq!(n, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trainable: Vec<(String, usize)> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| (p.name.clone(), p.value.numel()))
        .collect();
    let mut pick = |filter: &dyn Fn(&str) -> bool, k: usize| -> Vec<(String, usize)> {
        let pool: Vec<&(String, usize)> = trainable.iter().filter(|(n, _)| filter(n)).collect();
        assert!(!pool.is_empty());
        (0..k)
            .map(|_| {
                let (name, len) = *pool.choose(&mut rng).unwrap();
                (name.clone(), rng.random_range(0..*len))
            })
            .collect()
    };
    let mut out = pick(&|n| n.starts_with("hfa."), 4);
    out.extend(pick(&|n| n.starts_with("msfa."), 4));
    out.extend(pick(&|n| n.starts_with("selector.") && n.contains(".decision."), 3));
    let bias = trainable
        .iter()
        .find(|(n, _)| n.starts_with("selector.") && n.ends_with(".bias") && !n.contains(".decision."))
        .unwrap()
        .0
        .clone();
    out.push((bias.clone(), 0));
    out.push((bias, 1));
    out.extend(pick(&|n| n.starts_with("decoder."), 7));
    out
}

/// High-pass by a direct O(N⁴) DFT: drop every frequency with `|ky| <= half` and `|kx| <= half`.
pub fn dft_highpass(img: &ImageTensor, half: usize) -> Vec<Vec<f64>> {
    let (h, w) = (img.height(), img.width());
    let signed = |k: usize, n: usize| if k <= n / 2 { k as i64 } else { k as i64 - n as i64 };
    let tau = std::f64::consts::TAU;
    (0..img.channels())
        .map(|c| {
            let mut spec = vec![(0.0, 0.0); h * w];
            for ky in 0..h {
                for kx in 0..w {
                    if signed(ky, h).unsigned_abs() as usize <= half && signed(kx, w).unsigned_abs() as usize <= half {
                        continue;
                    }
                    let (mut re, mut im) = (0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let a = -tau * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                            let v = img.get(c, y, x);
                            re += v * a.cos();
                            im += v * a.sin();
                        }
                    }
                    spec[ky * w + kx] = (re, im);
                }
            }
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..h {
                        for kx in 0..w {
                            let (re, im) = spec[ky * w + kx];
                            let a = tau * ((ky * y) as f64 / h as f64 + (kx * x) as f64 / w as f64);
                            acc += re * a.cos() - im * a.sin();
                        }
                    }
                    out[y * w + x] = acc / (h * w) as f64;
                }
            }
            out
        })
        .collect()
}

/// Adaptive average pooling to `s × s` by explicit bin enumeration.
pub fn bin_average(f: &FeatureMap, s: usize) -> Vec<f64> {
    let g = f.grid();
    let mut out = Vec::new();
    for c in 0..f.channels() {
        for by in 0..s {
            for bx in 0..s {
                let ys = (by * g) / s..((by + 1) * g).div_ceil(s);
                let xs = (bx * g) / s..((bx + 1) * g).div_ceil(s);
                let mut sum = 0.0;
                let mut n = 0;
                for y in ys {
                    for x in xs.clone() {
                        sum += f.get(c, y, x);
                        n += 1;
                    }
                }
                out.push(sum / n as f64);
            }
        }
    }
    out
}

pub struct BruteMetrics {
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
}

fn edge_pixels(m: &Mask) -> Vec<(i64, i64)> {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if inside(x, y) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dx, dy)| !inside(x + dx, y + dy)) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Pairwise-distance Dice, IoU and HD95 under the same empty-mask conventions.
pub fn brute_metrics(a: &Mask, b: &Mask) -> BruteMetrics {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        inter += (p && q) as usize;
        na += p as usize;
        nb += q as usize;
    }
    let union = na + nb - inter;
    let dice = if na + nb == 0 { 100.0 } else { 200.0 * inter as f64 / (na + nb) as f64 };
    let iou = if union == 0 { 100.0 } else { 100.0 * inter as f64 / union as f64 };
    let (w, h) = (a.width(), a.height());
    let hd95 = match (na, nb) {
        (0, 0) => 0.0,
        (0, _) | (_, 0) => ((w * w + h * h) as f64).sqrt(),
        _ => {
            let (ea, eb) = (edge_pixels(a), edge_pixels(b));
            let nearest = |p: &(i64, i64), set: &[(i64, i64)]| {
                set.iter()
                    .map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2))
                    .min()
                    .map(|d| (d as f64).sqrt())
                    .unwrap()
            };
            let mut d: Vec<f64> = ea.iter().map(|p| nearest(p, &eb)).chain(eb.iter().map(|p| nearest(p, &ea))).collect();
            d.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let pos = 0.95 * (d.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
        }
    };
    BruteMetrics { dice, iou, hd95 }
}
