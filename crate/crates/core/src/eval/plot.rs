//! Minimal raster plots: axes, polylines and square markers, plus a CSV of
//! every plotted value. Output depends only on the input values.

use std::path::{Path, PathBuf};

use ::image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    Line,
    Scatter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plot {
    /// File stem of the emitted `.png` and `.csv`.
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub kind: PlotKind,
    pub series: Vec<Series>,
}

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 32;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn csv_text(plot: &Plot) -> String {
    let mut s = format!("series,{},{}\n", plot.x_label, plot.y_label);
    for series in &plot.series {
        for (x, y) in &series.points {
            s.push_str(&format!("{},{x},{y}\n", series.label));
        }
    }
    s
}

fn bounds(plot: &Plot) -> (f64, f64, f64, f64) {
    let pts = plot.series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a, b) };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    (x0, x1, y0, y1)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn line(img: &mut RgbImage, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn render(plot: &Plot) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (x0, x1, y0, y1) = bounds(plot);
    let (left, right) = (MARGIN as i64, (WIDTH - MARGIN) as i64);
    let (top, bottom) = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    let px = |x: f64| left + ((x - x0) / (x1 - x0) * (right - left) as f64).round() as i64;
    let py = |y: f64| bottom - ((y - y0) / (y1 - y0) * (bottom - top) as f64).round() as i64;
    let axis = [0, 0, 0];
    line(&mut img, (left, bottom), (right, bottom), axis);
    line(&mut img, (left, bottom), (left, top), axis);
    for k in 0..=4 {
        let tx = left + (right - left) * k / 4;
        let ty = bottom - (bottom - top) * k / 4;
        line(&mut img, (tx, bottom), (tx, bottom + 4), axis);
        line(&mut img, (left - 4, ty), (left, ty), axis);
    }
    for (i, s) in plot.series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s.points.iter().map(|&(x, y)| (px(x), py(y))).collect();
        if plot.kind == PlotKind::Line {
            for w in pts.windows(2) {
                line(&mut img, w[0], w[1], c);
            }
        }
        for &(x, y) in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut img, x + dx, y + dy, c);
                }
            }
        }
    }
    img
}

/// Writes `<name>.png` and `<name>.csv` for every plot into `dir`.
pub fn emit_plots(plots: &[Plot], dir: &Path) -> Result<Vec<PathBuf>> {
    if plots.is_empty() {
        return Err(Error::Eval("no plots to emit".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for plot in plots {
        let finite = plot.series.iter().flat_map(|s| &s.points).all(|(x, y)| x.is_finite() && y.is_finite());
        if plot.series.iter().all(|s| s.points.is_empty()) || !finite {
            return Err(Error::Eval(format!("plot '{}' has no finite points", plot.name)));
        }
        let csv = dir.join(format!("{}.csv", plot.name));
        std::fs::write(&csv, csv_text(plot)).map_err(|e| Error::io(&csv, e))?;
        let png = dir.join(format!("{}.png", plot.name));
        render(plot).save(&png)?;
        written.push(png);
        written.push(csv);
    }
    Ok(written)
}
