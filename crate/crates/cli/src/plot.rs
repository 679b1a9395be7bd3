//! Minimal raster charts: line plots for training curves and bar charts for
//! the ablation. No text rendering; series colors are fixed per index.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, axis);
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, axis);
    }
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
            img.put_pixel(x as u32, y as u32, c);
        }
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

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per series, sharing a y range.
pub fn line_chart(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    let mut img = canvas();
    let (lo, hi) = range(series.iter().flatten().copied());
    let plot_w = (W - MARGIN - MARGIN / 2) as f64;
    let plot_h = (H - MARGIN - MARGIN / 2) as f64;
    for (k, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        let n = s.len().max(2) - 1;
        let pt = |i: usize, v: f64| {
            let x = MARGIN as f64 + plot_w * i as f64 / n as f64;
            let y = (H - MARGIN) as f64 - plot_h * (v - lo) / (hi - lo);
            (x.round() as i64, y.round() as i64)
        };
        for i in 1..s.len() {
            line(&mut img, pt(i - 1, s[i - 1]), pt(i, s[i]), c);
        }
        if s.len() == 1 {
            let p = pt(0, s[0]);
            line(&mut img, p, (p.0 + 3, p.1), c);
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Vertical bars from zero, one color per bar, with optional error whiskers.
pub fn bar_chart(path: &Path, values: &[f64], errors: &[f64]) -> Result<()> {
    let mut img = canvas();
    let top = values
        .iter()
        .zip(errors.iter().chain(std::iter::repeat(&0.0)))
        .map(|(v, e)| v + e)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let plot_w = (W - MARGIN - MARGIN / 2) as f64;
    let plot_h = (H - MARGIN - MARGIN / 2) as f64;
    let slot = plot_w / values.len().max(1) as f64;
    let to_y = |v: f64| ((H - MARGIN) as f64 - plot_h * v / top).round() as i64;
    for (k, &v) in values.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        let x0 = (MARGIN as f64 + slot * (k as f64 + 0.2)).round() as u32;
        let x1 = (MARGIN as f64 + slot * (k as f64 + 0.8)).round() as u32;
        let y = to_y(v.max(0.0)).max(0) as u32;
        for x in x0..x1 {
            for yy in y..H - MARGIN {
                img.put_pixel(x, yy, c);
            }
        }
        if let Some(&e) = errors.get(k) {
            let xm = ((x0 + x1) / 2) as i64;
            line(&mut img, (xm, to_y(v - e)), (xm, to_y(v + e)), Rgb([0, 0, 0]));
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
