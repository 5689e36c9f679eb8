//! Photometric operations. None of them move pixels.

use serde::{Deserialize, Serialize};

use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorOp {
    Identity,
    AutoContrast,
    Equalize,
    Solarize,
    Color,
    Contrast,
    Brightness,
    Sharpness,
    Posterize,
}

impl ColorOp {
    pub const ALL: [ColorOp; 9] = [
        ColorOp::Identity,
        ColorOp::AutoContrast,
        ColorOp::Equalize,
        ColorOp::Solarize,
        ColorOp::Color,
        ColorOp::Contrast,
        ColorOp::Brightness,
        ColorOp::Sharpness,
        ColorOp::Posterize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ColorOp::Identity => "identity",
            ColorOp::AutoContrast => "autocontrast",
            ColorOp::Equalize => "equalize",
            ColorOp::Solarize => "solarize",
            ColorOp::Color => "color",
            ColorOp::Contrast => "contrast",
            ColorOp::Brightness => "brightness",
            ColorOp::Sharpness => "sharpness",
            ColorOp::Posterize => "posterize",
        }
    }
}

/// Sampling ranges for the magnitude of each parametrized color op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorMagnitudes {
    pub solarize_threshold: (f64, f64),
    pub color_factor: (f64, f64),
    pub contrast_factor: (f64, f64),
    pub brightness_factor: (f64, f64),
    pub sharpness_factor: (f64, f64),
    pub posterize_bits: (u32, u32),
}

impl Default for ColorMagnitudes {
    fn default() -> Self {
        ColorMagnitudes {
            solarize_threshold: (0.5, 1.0),
            color_factor: (0.5, 1.5),
            contrast_factor: (0.5, 1.5),
            brightness_factor: (0.5, 1.5),
            sharpness_factor: (0.5, 1.5),
            posterize_bits: (4, 8),
        }
    }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn blend(degenerate: &Image, img: &Image, factor: f32) -> Image {
    let mut out = img.clone();
    for (o, (&d, &v)) in out.data.iter_mut().zip(degenerate.data.iter().zip(&img.data)) {
        *o = (d + factor * (v - d)).clamp(0.0, 1.0);
    }
    out
}

pub fn autocontrast(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..Image::CHANNELS {
        let plane = out.plane_mut(c);
        let lo = plane.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            for v in plane.iter_mut() {
                *v = (*v - lo) / (hi - lo);
            }
        }
    }
    out
}

/// Per-channel histogram equalization over 256 levels.
pub fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..Image::CHANNELS {
        let plane = out.plane_mut(c);
        let level = |v: f32| ((v.clamp(0.0, 1.0) * 255.0).round() as usize).min(255);
        let mut hist = [0usize; 256];
        for &v in plane.iter() {
            hist[level(v)] += 1;
        }
        let n = plane.len();
        let last_nonzero = hist.iter().rposition(|&h| h > 0).map(|i| hist[i]).unwrap_or(0);
        let step = (n - last_nonzero) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0f32; 256];
        let mut acc = step / 2;
        for (i, l) in lut.iter_mut().enumerate() {
            *l = ((acc / step).min(255)) as f32 / 255.0;
            acc += hist[i];
        }
        for v in plane.iter_mut() {
            *v = lut[level(*v)];
        }
    }
    out
}

pub fn solarize(img: &Image, threshold: f32) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    out
}

pub fn color(img: &Image, factor: f32) -> Image {
    let mut gray = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luma(img.pixel(x, y));
            gray.put_pixel(x, y, [l, l, l]);
        }
    }
    blend(&gray, img, factor)
}

pub fn contrast(img: &Image, factor: f32) -> Image {
    let n = (img.width * img.height).max(1) as f32;
    let mut mean = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            mean += luma(img.pixel(x, y));
        }
    }
    let mean = mean / n;
    let degenerate = Image::filled(img.width, img.height, [mean; 3]);
    blend(&degenerate, img, factor)
}

pub fn brightness(img: &Image, factor: f32) -> Image {
    let black = Image::new(img.width, img.height);
    blend(&black, img, factor)
}

/// Blends with a 3x3 smoothed copy (center weight 5, neighbours 1); borders keep their values.
pub fn sharpness(img: &Image, factor: f32) -> Image {
    let mut smooth = img.clone();
    if img.width >= 3 && img.height >= 3 {
        for c in 0..Image::CHANNELS {
            for y in 1..img.height - 1 {
                for x in 1..img.width - 1 {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let w = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                            acc += w * img.get(c, x + dx - 1, y + dy - 1);
                        }
                    }
                    smooth.set(c, x, y, acc / 13.0);
                }
            }
        }
    }
    blend(&smooth, img, factor)
}

pub fn posterize(img: &Image, bits: u32) -> Image {
    let bits = bits.clamp(1, 8);
    let mask: u8 = !((1u16 << (8 - bits)) - 1) as u8;
    let mut out = img.clone();
    for v in &mut out.data {
        let q = ((v.clamp(0.0, 1.0) * 255.0).round() as u8) & mask;
        *v = q as f32 / 255.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient() -> Image {
        let mut img = Image::new(8, 8);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    img.set(c, x, y, 0.2 + 0.05 * (x + y) as f32 / (1.0 + c as f32));
                }
            }
        }
        img
    }

    #[test]
    fn neutral_factors_are_identity() {
        let img = gradient();
        for out in [
            color(&img, 1.0),
            contrast(&img, 1.0),
            brightness(&img, 1.0),
            sharpness(&img, 1.0),
            posterize(&img, 8),
        ] {
            for (a, b) in out.data.iter().zip(&img.data) {
                assert!((a - b).abs() < 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn autocontrast_stretches() {
        let out = autocontrast(&gradient());
        for c in 0..3 {
            let p = out.plane(c);
            assert!(p.iter().cloned().fold(f32::INFINITY, f32::min).abs() < 1e-6);
            assert!((p.iter().cloned().fold(0.0, f32::max) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn solarize_inverts_above_threshold() {
        let img = Image::filled(2, 2, [0.9, 0.1, 0.5]);
        let out = solarize(&img, 0.5);
        assert!((out.get(0, 0, 0) - 0.1).abs() < 1e-6);
        assert_eq!(out.get(1, 0, 0), 0.1);
        assert_eq!(out.get(2, 0, 0), 0.5);
    }

    #[test]
    fn equalize_keeps_range() {
        let out = equalize(&gradient());
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
