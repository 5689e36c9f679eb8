//! Student/teacher augmentation branches.
//!
//! Every branch returns the composite [`AffineTransform`] mapping original
//! image coordinates into the augmented view. Photometric ops and cutout
//! never contribute to it.

pub mod color;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use color::{ColorMagnitudes, ColorOp};

use crate::error::{Error, Result};
use crate::geometry::AffineTransform;
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Student on labeled images: resize, flip, color.
    Labeled,
    /// Student on unlabeled images: resize, flip, color, geometric, cutout.
    Strong,
    /// Teacher on unlabeled images: resize, flip.
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometricOp {
    Translate,
    Shear,
    Rotate,
}

impl GeometricOp {
    pub const ALL: [GeometricOp; 3] = [GeometricOp::Translate, GeometricOp::Shear, GeometricOp::Rotate];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoutSpec {
    /// Inclusive range for the number of erased rectangles.
    pub count: (u32, u32),
    /// Side length as a fraction of the shorter image side.
    pub size: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationRecipe {
    pub branch: Branch,
    /// Inclusive range for the resized short edge, in pixels.
    pub resize_short_edge: (u32, u32),
    pub flip_prob: f64,
    /// Selection probability of each op in [`ColorOp::ALL`] order; at most one op is applied.
    pub color_op_probs: [f64; 9],
    pub color_magnitudes: ColorMagnitudes,
    /// Selection probability of each op in [`GeometricOp::ALL`] order; at most one op is applied.
    pub geometric_op_probs: [f64; 3],
    /// Translation as a fraction of image width/height.
    pub translate_range: (f64, f64),
    pub shear_range_deg: (f64, f64),
    pub rotate_range_deg: (f64, f64),
    pub cutout: Option<CutoutSpec>,
    /// Fill for pixels exposed by warps and cutout; `None` uses the image mean.
    pub fill_color: Option<[f32; 3]>,
}

impl AugmentationRecipe {
    pub fn weak(short_edge: (u32, u32)) -> Self {
        AugmentationRecipe {
            branch: Branch::Weak,
            resize_short_edge: short_edge,
            flip_prob: 0.5,
            color_op_probs: [0.0; 9],
            color_magnitudes: ColorMagnitudes::default(),
            geometric_op_probs: [0.0; 3],
            translate_range: (-0.1, 0.1),
            shear_range_deg: (-30.0, 30.0),
            rotate_range_deg: (-30.0, 30.0),
            cutout: None,
            fill_color: None,
        }
    }

    pub fn labeled(short_edge: (u32, u32)) -> Self {
        AugmentationRecipe {
            branch: Branch::Labeled,
            color_op_probs: [1.0 / 9.0; 9],
            ..Self::weak(short_edge)
        }
    }

    pub fn strong(short_edge: (u32, u32)) -> Self {
        AugmentationRecipe {
            branch: Branch::Strong,
            color_op_probs: [1.0 / 9.0; 9],
            geometric_op_probs: [1.0 / 3.0; 3],
            cutout: Some(CutoutSpec {
                count: (1, 5),
                size: (0.0, 0.2),
            }),
            ..Self::weak(short_edge)
        }
    }

    /// Full-resolution recipe: short edge in `[400, 1200]`.
    pub fn coco(branch: Branch) -> Self {
        Self::for_branch(branch, (400, 1200))
    }

    /// Canvas-scaled recipe: short edge in `[0.75, 1.5] * canvas`.
    pub fn desk(branch: Branch, canvas_short_edge: u32) -> Self {
        let lo = (canvas_short_edge as f64 * 0.75).round() as u32;
        let hi = (canvas_short_edge as f64 * 1.5).round() as u32;
        Self::for_branch(branch, (lo, hi))
    }

    pub fn for_branch(branch: Branch, short_edge: (u32, u32)) -> Self {
        match branch {
            Branch::Labeled => Self::labeled(short_edge),
            Branch::Strong => Self::strong(short_edge),
            Branch::Weak => Self::weak(short_edge),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Augment(format!("{name} = {p} is not a probability")))
            }
        };
        let ordered = |name: &str, lo: f64, hi: f64| {
            if lo <= hi {
                Ok(())
            } else {
                Err(Error::Augment(format!("{name} range ({lo}, {hi}) is not ordered")))
            }
        };
        prob("flip_prob", self.flip_prob)?;
        for &p in self.color_op_probs.iter().chain(&self.geometric_op_probs) {
            prob("op probability", p)?;
        }
        for (name, probs) in [
            ("color_op_probs", &self.color_op_probs[..]),
            ("geometric_op_probs", &self.geometric_op_probs[..]),
        ] {
            let total: f64 = probs.iter().sum();
            if total > 1.0 + 1e-9 {
                return Err(Error::Augment(format!("{name} sum to {total} > 1")));
            }
        }
        let (lo, hi) = self.resize_short_edge;
        if lo == 0 {
            return Err(Error::Augment("resize short edge must be positive".into()));
        }
        ordered("resize_short_edge", lo as f64, hi as f64)?;
        ordered("translate_range", self.translate_range.0, self.translate_range.1)?;
        ordered("shear_range_deg", self.shear_range_deg.0, self.shear_range_deg.1)?;
        ordered("rotate_range_deg", self.rotate_range_deg.0, self.rotate_range_deg.1)?;
        let m = &self.color_magnitudes;
        for (name, (lo, hi)) in [
            ("solarize_threshold", m.solarize_threshold),
            ("color_factor", m.color_factor),
            ("contrast_factor", m.contrast_factor),
            ("brightness_factor", m.brightness_factor),
            ("sharpness_factor", m.sharpness_factor),
        ] {
            ordered(name, lo, hi)?;
        }
        ordered("posterize_bits", m.posterize_bits.0 as f64, m.posterize_bits.1 as f64)?;
        if let Some(c) = &self.cutout {
            ordered("cutout.count", c.count.0 as f64, c.count.1 as f64)?;
            ordered("cutout.size", c.size.0, c.size.1)?;
            if c.size.0 < 0.0 || c.size.1 > 1.0 {
                return Err(Error::Augment("cutout.size must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedOp {
    pub name: String,
    pub params: Vec<f64>,
}

impl AppliedOp {
    fn new(name: &str, params: Vec<f64>) -> Self {
        AppliedOp {
            name: name.to_string(),
            params,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub image: Image,
    /// original -> view
    pub transform: AffineTransform,
    pub applied_ops: Vec<AppliedOp>,
}

impl AugmentedView {
    /// The unaugmented image.
    pub fn identity(image: Image) -> Self {
        AugmentedView {
            image,
            transform: AffineTransform::identity(),
            applied_ops: Vec::new(),
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Picks at most one index according to `probs`; leftover mass picks none.
fn pick<R: Rng>(rng: &mut R, probs: &[f64]) -> Option<usize> {
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Some(i);
        }
    }
    None
}

const MAX_GEOMETRIC_RETRIES: usize = 8;

pub fn augment<R: Rng>(image: &Image, recipe: &AugmentationRecipe, rng: &mut R) -> Result<AugmentedView> {
    if image.is_empty() {
        return Err(Error::Augment("cannot augment an empty image".into()));
    }
    recipe.validate()?;
    let mut ops = Vec::new();
    let fill = recipe.fill_color.unwrap_or_else(|| image.mean_color());

    // resize
    let (lo, hi) = recipe.resize_short_edge;
    let target = rng.random_range(lo..=hi) as f64;
    let short = image.width.min(image.height) as f64;
    let new_w = ((image.width as f64 * target / short).round() as usize).max(1);
    let new_h = ((image.height as f64 * target / short).round() as usize).max(1);
    let sx = new_w as f64 / image.width as f64;
    let sy = new_h as f64 / image.height as f64;
    let mut img = if new_w == image.width && new_h == image.height {
        image.clone()
    } else {
        image.resize(new_w, new_h)
    };
    let mut transform = AffineTransform::scale(sx, sy);
    ops.push(AppliedOp::new("resize", vec![sx, sy]));

    // flip
    if recipe.flip_prob > 0.0 && rng.random::<f64>() < recipe.flip_prob {
        img = img.flip_horizontal();
        transform = AffineTransform::hflip(new_w as f64).compose(&transform);
        ops.push(AppliedOp::new("flip", vec![new_w as f64]));
    }

    // color
    if let Some(i) = pick(rng, &recipe.color_op_probs) {
        let op = ColorOp::ALL[i];
        let m = &recipe.color_magnitudes;
        let (out, param) = match op {
            ColorOp::Identity => (img, Vec::new()),
            ColorOp::AutoContrast => (color::autocontrast(&img), Vec::new()),
            ColorOp::Equalize => (color::equalize(&img), Vec::new()),
            ColorOp::Solarize => {
                let t = uniform(rng, m.solarize_threshold);
                (color::solarize(&img, t as f32), vec![t])
            }
            ColorOp::Color => {
                let f = uniform(rng, m.color_factor);
                (color::color(&img, f as f32), vec![f])
            }
            ColorOp::Contrast => {
                let f = uniform(rng, m.contrast_factor);
                (color::contrast(&img, f as f32), vec![f])
            }
            ColorOp::Brightness => {
                let f = uniform(rng, m.brightness_factor);
                (color::brightness(&img, f as f32), vec![f])
            }
            ColorOp::Sharpness => {
                let f = uniform(rng, m.sharpness_factor);
                (color::sharpness(&img, f as f32), vec![f])
            }
            ColorOp::Posterize => {
                let (lo, hi) = m.posterize_bits;
                let b = rng.random_range(lo..=hi);
                (color::posterize(&img, b), vec![b as f64])
            }
        };
        img = out;
        ops.push(AppliedOp::new(op.name(), param));
    }

    // geometric
    if let Some(i) = pick(rng, &recipe.geometric_op_probs) {
        let (w, h) = (img.width as f64, img.height as f64);
        let mut accepted = None;
        for _ in 0..MAX_GEOMETRIC_RETRIES {
            let (name, params, g) = match GeometricOp::ALL[i] {
                GeometricOp::Translate => {
                    let tx = uniform(rng, recipe.translate_range) * w;
                    let ty = uniform(rng, recipe.translate_range) * h;
                    ("translate", vec![tx, ty], AffineTransform::translation(tx, ty))
                }
                GeometricOp::Shear => {
                    let along_x = rng.random::<bool>();
                    let deg = uniform(rng, recipe.shear_range_deg);
                    let s = if along_x {
                        AffineTransform::shear_x(deg.to_radians())
                    } else {
                        AffineTransform::shear_y(deg.to_radians())
                    };
                    (
                        if along_x { "shear_x" } else { "shear_y" },
                        vec![deg],
                        s.about(w / 2.0, h / 2.0),
                    )
                }
                GeometricOp::Rotate => {
                    let deg = uniform(rng, recipe.rotate_range_deg);
                    ("rotate", vec![deg], AffineTransform::rotation(deg.to_radians()).about(w / 2.0, h / 2.0))
                }
            };
            let composed = g.compose(&transform);
            if composed.determinant().abs() > 1e-6 && g.is_invertible() {
                accepted = Some((name, params, g, composed));
                break;
            }
        }
        let (name, params, g, composed) = accepted.ok_or_else(|| {
            Error::Augment(format!(
                "degenerate geometric transform after {MAX_GEOMETRIC_RETRIES} attempts"
            ))
        })?;
        img = warp(&img, &g, fill)?;
        transform = composed;
        ops.push(AppliedOp::new(name, params));
    }

    // cutout
    if let Some(cut) = &recipe.cutout {
        let n = rng.random_range(cut.count.0..=cut.count.1);
        let (w, h) = (img.width as f64, img.height as f64);
        let short = w.min(h);
        for _ in 0..n {
            let cw = uniform(rng, cut.size) * short;
            let ch = uniform(rng, cut.size) * short;
            let cx = rng.random::<f64>() * w;
            let cy = rng.random::<f64>() * h;
            let (x1, x2) = ((cx - cw / 2.0).max(0.0), (cx + cw / 2.0).min(w));
            let (y1, y2) = ((cy - ch / 2.0).max(0.0), (cy + ch / 2.0).min(h));
            for y in (y1.round() as usize)..(y2.round() as usize) {
                for x in (x1.round() as usize)..(x2.round() as usize) {
                    img.put_pixel(x, y, fill);
                }
            }
            ops.push(AppliedOp::new("cutout", vec![x1, y1, x2, y2]));
        }
    }

    Ok(AugmentedView {
        image: img,
        transform,
        applied_ops: ops,
    })
}

/// Resamples `img` under `g` (source -> destination), keeping the canvas size.
pub fn warp(img: &Image, g: &AffineTransform, fill: [f32; 3]) -> Result<Image> {
    let inv = g.invert()?;
    let mut out = Image::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = inv.apply_point(x as f64 + 0.5, y as f64 + 0.5);
            for (c, &f) in fill.iter().enumerate() {
                let v = img.sample_bilinear(c, sx, sy).unwrap_or(f);
                out.set(c, x, y, v);
            }
        }
    }
    Ok(out)
}

/// Maps teacher-view coordinates into student-view coordinates:
/// `transform_s ∘ transform_t⁻¹`.
pub fn relate_views(student: &AugmentedView, teacher: &AugmentedView) -> Result<AffineTransform> {
    Ok(student.transform.compose(&teacher.transform.invert()?))
}
