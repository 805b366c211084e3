//! Dice, IoU and HD95 with explicit conventions for empty masks, plus dataset evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::pipeline::{resize_mask, resize_to_model, SegSample};
use crate::prompts::{make_prompt, Phase, PromptSetting};
use crate::types::Mask;

/// How the 95th percentile is interpolated; written into every report.
pub const PERCENTILE_METHOD: &str = "linear";

fn check_shapes(a: &Mask, b: &Mask) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "masks {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

fn overlap(a: &Mask, b: &Mask) -> (usize, usize, usize) {
    let inter = a.data().iter().zip(b.data()).filter(|(&p, &g)| p && g).count();
    (inter, a.count(), b.count())
}

/// `200·|P∩G| / (|P|+|G|)`; 100 when both are empty.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    Ok(if p + g == 0 { 100.0 } else { 200.0 * i as f64 / (p + g) as f64 })
}

/// `100·|P∩G| / |P∪G|`; 100 when both are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (i, p, g) = overlap(pred, gt);
    let union = p + g - i;
    Ok(if union == 0 { 100.0 } else { 100.0 * i as f64 / union as f64 })
}

/// Foreground pixels with at least one background 4-neighbour; the frame edge counts as background.
pub fn boundary(mask: &Mask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                out.push((x, y));
            }
        }
    }
    out
}

/// 1-D lower envelope of parabolas: `out[q] = min_p (q − p)² + f[p]`.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        match first {
            None => {
                first = Some(q);
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            }
            Some(_) => loop {
                let p = v[k];
                let s = ((fq + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k] && k > 0 {
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            },
        }
    }
    if first.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `sites` pixel.
fn squared_distance_field(sites: &[(usize, usize)], w: usize, h: usize) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; w * h];
    for &(x, y) in sites {
        grid[y * w + x] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    let mut row = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row);
        grid[y * w..(y + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Percentile `q ∈ [0, 1]` of sorted values with linear interpolation between order statistics.
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HdResult {
    pub distance: f64,
    /// Exactly one mask was empty and the image-diagonal penalty was used.
    pub degenerate: bool,
}

/// Symmetric 95th-percentile boundary distance, scaled by `spacing` when given.
pub fn hd95(pred: &Mask, gt: &Mask, spacing: Option<f64>) -> Result<HdResult> {
    check_shapes(pred, gt)?;
    let scale = spacing.unwrap_or(1.0);
    let (w, h) = (pred.width(), pred.height());
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => {
            return Ok(HdResult {
                distance: 0.0,
                degenerate: false,
            })
        }
        (true, false) | (false, true) => {
            return Ok(HdResult {
                distance: ((w * w + h * h) as f64).sqrt() * scale,
                degenerate: true,
            })
        }
        _ => {}
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (dp, dg) = (squared_distance_field(&bp, w, h), squared_distance_field(&bg, w, h));
    let mut dists: Vec<f64> = bp
        .iter()
        .map(|&(x, y)| dg[y * w + x])
        .chain(bg.iter().map(|&(x, y)| dp[y * w + x]))
        .map(f64::sqrt)
        .collect();
    dists.sort_by(f64::total_cmp);
    Ok(HdResult {
        distance: percentile_linear(&dists, 0.95) * scale,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub setting: PromptSetting,
    pub rate: f64,
    pub dice: f64,
    pub hd95: f64,
    pub miou: f64,
    pub degenerate_flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: PromptSetting,
    pub rate: f64,
    pub samples: Vec<SampleMetrics>,
    pub mean_dice: f64,
    pub mean_miou: f64,
    pub mean_hd95: f64,
    /// Samples scored with the empty-prediction penalty.
    pub degenerate_count: usize,
    /// Samples skipped because their ground truth was empty.
    pub excluded_empty_gt: usize,
    pub hd95_units: String,
    pub percentile_method: String,
}

/// Mean that does not depend on the order of `values`.
fn stable_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

impl MetricsReport {
    pub fn from_samples(setting: PromptSetting, rate: f64, samples: Vec<SampleMetrics>, excluded: usize, mm: bool) -> Self {
        Self {
            setting,
            rate,
            mean_dice: stable_mean(samples.iter().map(|s| s.dice)),
            mean_miou: stable_mean(samples.iter().map(|s| s.miou)),
            mean_hd95: stable_mean(samples.iter().map(|s| s.hd95)),
            degenerate_count: samples.iter().filter(|s| s.degenerate_flag).count(),
            excluded_empty_gt: excluded,
            hd95_units: if mm { "mm" } else { "px" }.into(),
            percentile_method: PERCENTILE_METHOD.into(),
            samples,
        }
    }

    /// Per-sample CSV with columns `sample_id, setting, rate, dice, hd95, miou, degenerate_flag`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for s in &self.samples {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregate summary without the per-sample rows.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "setting": self.setting,
            "rate": self.rate,
            "count": self.samples.len(),
            "mean_dice": self.mean_dice,
            "mean_miou": self.mean_miou,
            "mean_hd95": self.mean_hd95,
            "degenerate_count": self.degenerate_count,
            "excluded_empty_gt": self.excluded_empty_gt,
            "hd95_units": self.hd95_units,
            "percentile_method": self.percentile_method,
        })
    }
}

/// Scores one prediction against a sample, back-projecting to native resolution first.
pub fn score_sample(pred: &Mask, sample: &SegSample, setting: PromptSetting, rate: f64) -> Result<SampleMetrics> {
    let gt = sample.native_ground_truth();
    let pred = if pred.same_shape(gt) {
        pred.clone()
    } else {
        resize_mask(pred, gt.width(), gt.height())
    };
    let hd = hd95(&pred, gt, sample.meta.spacing)?;
    Ok(SampleMetrics {
        sample_id: sample.meta.id(),
        setting,
        rate,
        dice: dice_score(&pred, gt)?,
        hd95: hd.distance,
        miou: iou(&pred, gt)?,
        degenerate_flag: hd.degenerate,
    })
}

/// Prompts, predicts, binarizes and scores every sample with non-empty ground truth.
pub fn evaluate(model: &dyn Segmenter, samples: &[SegSample], setting: PromptSetting, rate: f64) -> Result<MetricsReport> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut excluded = 0;
    let size = model.input_size();
    for s in samples {
        if s.native_ground_truth().is_empty() {
            excluded += 1;
            continue;
        }
        let resized;
        let input = if s.image.width() == size && s.image.height() == size {
            s
        } else {
            resized = resize_to_model(s, size)?;
            &resized
        };
        let bbox = make_prompt(setting, Phase::Test, input, rate)?;
        let pred = model.predict(&input.image, &bbox)?.binarize();
        rows.push(score_sample(&pred, input, setting, rate)?);
    }
    if rows.is_empty() {
        return Err(Error::NotEnoughData {
            needed: 1,
            available: 0,
        });
    }
    let mm = samples.iter().all(|s| s.meta.spacing.is_some());
    Ok(MetricsReport::from_samples(setting, rate, rows, excluded, mm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> Mask {
        Mask::from_fn(w, h, |x, y| on.contains(&(x, y)))
    }

    #[test]
    fn dice_and_iou_examples() {
        let p = mask(4, 4, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        let g = mask(4, 4, &[(0, 0), (1, 0)]);
        assert!((dice_score(&p, &g).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&p, &g).unwrap(), 50.0);
        assert_eq!(dice_score(&p, &p).unwrap(), 100.0);
        let e = Mask::empty(4, 4);
        assert_eq!(dice_score(&e, &e).unwrap(), 100.0);
        assert_eq!(iou(&e, &e).unwrap(), 100.0);
        assert_eq!(dice_score(&g, &mask(4, 4, &[(3, 3)])).unwrap(), 0.0);
        assert!(dice_score(&g, &Mask::empty(3, 4)).is_err());
    }

    #[test]
    fn hd95_examples() {
        let a = mask(10, 10, &[(2, 5)]);
        let b = mask(10, 10, &[(5, 5)]);
        assert_eq!(hd95(&a, &b, None).unwrap().distance, 3.0);
        assert_eq!(hd95(&a, &a, None).unwrap().distance, 0.0);
        assert_eq!(hd95(&a, &b, Some(0.5)).unwrap().distance, 1.5);
        let empty = Mask::empty(10, 10);
        let r = hd95(&empty, &b, None).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.distance, 200f64.sqrt());
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..21).map(f64::from).collect();
        assert_eq!(percentile_linear(&v, 0.95), 19.0);
        assert_eq!(percentile_linear(&[1.0, 3.0], 0.95), 2.9);
        assert_eq!(percentile_linear(&[4.0], 0.95), 4.0);
    }

    #[test]
    fn distance_field_matches_enumeration() {
        let sites = [(1, 1), (7, 3), (4, 8)];
        let (w, h) = (9, 10);
        let f = squared_distance_field(&sites, w, h);
        for y in 0..h {
            for x in 0..w {
                let best = sites
                    .iter()
                    .map(|&(sx, sy)| (x as f64 - sx as f64).powi(2) + (y as f64 - sy as f64).powi(2))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(f[y * w + x], best);
            }
        }
    }
}
