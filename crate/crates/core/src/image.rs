//! Planar RGB float images.

use std::path::Path;

use crate::error::{Error, Result};

/// RGB image, channel-major (`c * h * w + y * w + x`), values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; Self::CHANNELS * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for c in 0..Self::CHANNELS {
            img.plane_mut(c).fill(color[c]);
        }
        img
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        [self.get(0, x, y), self.get(1, x, y), self.get(2, x, y)]
    }

    pub fn put_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, x, y, v);
        }
    }

    pub fn mean_color(&self) -> [f32; 3] {
        let n = (self.width * self.height).max(1) as f64;
        let mut out = [0.0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            *o = (self.plane(c).iter().map(|&v| v as f64).sum::<f64>() / n) as f32;
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Bilinear sample at continuous pixel-center coordinates; `None` outside.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> Option<f32> {
        let (w, h) = (self.width as f64, self.height as f64);
        // pixel (i, j) has its center at (i + 0.5, j + 0.5)
        let fx = x - 0.5;
        let fy = y - 0.5;
        if fx < -0.5 || fy < -0.5 || fx > w - 0.5 || fy > h - 0.5 {
            return None;
        }
        let fx = fx.clamp(0.0, w - 1.0);
        let fy = fy.clamp(0.0, h - 1.0);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = (fx - x0 as f64) as f32;
        let ay = (fy - y0 as f64) as f32;
        let top = self.get(c, x0, y0) * (1.0 - ax) + self.get(c, x1, y0) * ax;
        let bot = self.get(c, x0, y1) * (1.0 - ax) + self.get(c, x1, y1) * ax;
        Some(top * (1.0 - ay) + bot * ay)
    }

    /// Bilinear resize to the given size (pixel-center aligned).
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let mut out = Image::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                let src_y = (y as f64 + 0.5) * sy;
                for x in 0..width {
                    let src_x = (x as f64 + 0.5) * sx;
                    let v = self.sample_bilinear(c, src_x, src_y).unwrap_or(0.0);
                    out.set(c, x, y, v);
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.width, self.height);
        for c in 0..Self::CHANNELS {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, self.width - 1 - x, y, self.get(c, x, y));
                }
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> ::image::RgbImage {
        ::image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            ::image::Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &::image::RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            out.put_pixel(x as usize, y as usize, p.0.map(|v| v as f32 / 255.0));
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, ::image::ImageFormat::Png)
            .map_err(Error::from)
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = ::image::open(path)?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }
}
