//! Bare raster plots for `--png`: axes box, no text. The CSVs carry the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;

const W: u32 = 720;
const H: u32 = 440;
const MARGIN: u32 = 30;

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

pub fn color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

struct Frame {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.04 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

impl Frame {
    fn new(points: &[(f64, f64)]) -> Self {
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        let black = Rgb([0, 0, 0]);
        for x in MARGIN..=W - MARGIN {
            img.put_pixel(x, MARGIN, black);
            img.put_pixel(x, H - MARGIN, black);
        }
        for y in MARGIN..=H - MARGIN {
            img.put_pixel(MARGIN, y, black);
            img.put_pixel(W - MARGIN, y, black);
        }
        Self {
            img,
            x: span(points.iter().map(|p| p.0)),
            y: span(points.iter().map(|p| p.1)),
        }
    }

    fn to_px(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let inner_w = f64::from(W - 2 * MARGIN);
        let inner_h = f64::from(H - 2 * MARGIN);
        (
            f64::from(MARGIN) + (x - self.x.0) / (self.x.1 - self.x.0) * inner_w,
            f64::from(H - MARGIN) - (y - self.y.0) / (self.y.1 - self.y.0) * inner_h,
        )
    }

    fn dot(&mut self, (px, py): (f64, f64), r: i64, c: Rgb<u8>) {
        for dx in -r..=r {
            for dy in -r..=r {
                let (x, y) = (px.round() as i64 + dx, py.round() as i64 + dy);
                if x >= 0 && y >= 0 && x < i64::from(W) && y < i64::from(H) {
                    self.img.put_pixel(x as u32, y as u32, c);
                }
            }
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let (pa, pb) = (self.to_px(a), self.to_px(b));
        let n = ((pb.0 - pa.0).abs().max((pb.1 - pa.1).abs()).ceil() as usize).max(1);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            self.dot((pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1)), 0, c);
        }
    }
}

/// One polyline per series.
pub fn lines(series: &[Vec<(f64, f64)>], path: &Path) -> anyhow::Result<()> {
    let all: Vec<_> = series.iter().flatten().copied().collect();
    let mut f = Frame::new(&all);
    for (i, s) in series.iter().enumerate() {
        for w in s.windows(2) {
            f.segment(w[0], w[1], color(i));
        }
    }
    f.img.save(path)?;
    Ok(())
}

/// Points coloured by group index.
pub fn scatter(points: &[(f64, f64, usize)], path: &Path) -> anyhow::Result<()> {
    let xy: Vec<_> = points.iter().map(|p| (p.0, p.1)).collect();
    let mut f = Frame::new(&xy);
    for &(x, y, g) in points {
        let p = f.to_px((x, y));
        f.dot(p, 2, color(g));
    }
    f.img.save(path)?;
    Ok(())
}

/// Frames left to right, mel bins bottom to top, dark to bright.
pub fn heatmap(data: &Array2<f64>, path: &Path) -> anyhow::Result<()> {
    let (t, m) = data.dim();
    anyhow::ensure!(t > 0 && m > 0, "empty spectrogram");
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = (hi - lo).max(1e-12);
    let (sx, sy) = ((720 / t as u32).clamp(1, 8), 3u32);
    let mut img = RgbImage::new(t as u32 * sx, m as u32 * sy);
    for ((i, j), &v) in data.indexed_iter() {
        let u = (v - lo) / range;
        let c = Rgb([(255.0 * u) as u8, (255.0 * u * u) as u8, (255.0 * (1.0 - u) * 0.6 + 40.0 * u) as u8]);
        for dx in 0..sx {
            for dy in 0..sy {
                img.put_pixel(i as u32 * sx + dx, (m - 1 - j) as u32 * sy + dy, c);
            }
        }
    }
    img.save(path)?;
    Ok(())
}
