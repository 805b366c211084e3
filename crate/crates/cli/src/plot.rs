//! Minimal line plots rendered straight to PNG.

use std::path::Path;

use boxadapt_core::Result;
use image::{Rgb, RgbImage};

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: f64 = 40.0;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
        img.put_pixel(x as u32, y as u32, c);
    }
}

// Bresenham
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Axes, polyline and point markers; x grows to the right whatever order `points` come in.
pub fn line_plot(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([40, 40, 40]);
    let (left, bottom, right, top) = (MARGIN, H as f64 - MARGIN, W as f64 - MARGIN / 2.0, MARGIN / 2.0);
    line(&mut img, (left as i64, bottom as i64), (right as i64, bottom as i64), axis);
    line(&mut img, (left as i64, bottom as i64), (left as i64, top as i64), axis);

    let mut pts: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if !pts.is_empty() {
        let span = |v: Vec<f64>| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) }
        };
        let (xlo, xhi) = span(pts.iter().map(|p| p.0).collect());
        let (ylo, yhi) = span(pts.iter().map(|p| p.1).collect());
        let px: Vec<(i64, i64)> = pts
            .iter()
            .map(|&(x, y)| {
                let u = left + (x - xlo) / (xhi - xlo) * (right - left);
                let v = bottom - (y - ylo) / (yhi - ylo) * (bottom - top);
                (u.round() as i64, v.round() as i64)
            })
            .collect();
        let blue = Rgb([31, 90, 180]);
        for pair in px.windows(2) {
            line(&mut img, pair[0], pair[1], blue);
        }
        for &(u, v) in &px {
            for d in -2..=2 {
                put(&mut img, u + d, v, blue);
                put(&mut img, u, v + d, blue);
            }
        }
    }
    img.save(path)?;
    Ok(())
}
