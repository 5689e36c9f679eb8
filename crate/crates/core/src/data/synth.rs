//! Procedural scenes of colored shapes on a noisy background.
//!
//! Each shape kind is a class. Objects never overlap (a one-pixel gap is kept
//! between placement rectangles) so every annotation is the exact tight box
//! of its rendered pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Annotation, Category, Dataset, DatasetIndex, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Plus,
    Ring,
    Frame,
    Diamond,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Plus,
        ShapeKind::Ring,
        ShapeKind::Frame,
        ShapeKind::Diamond,
        ShapeKind::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Plus => "plus",
            ShapeKind::Ring => "ring",
            ShapeKind::Frame => "frame",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Cross => "cross",
        }
    }

    /// Membership test in the unit square of the object's placement rectangle.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            ShapeKind::Square => true,
            ShapeKind::Circle => r2 <= 0.25,
            ShapeKind::Triangle => du.abs() <= 0.5 * v,
            ShapeKind::Plus => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
            ShapeKind::Ring => (0.09..=0.25).contains(&r2),
            ShapeKind::Frame => u < 0.22 || u > 0.78 || v < 0.22 || v > 0.78,
            ShapeKind::Diamond => du.abs() + dv.abs() <= 0.5,
            ShapeKind::Cross => (u - v).abs() <= 0.18 || (u + v - 1.0).abs() <= 0.18,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub canvas_width: usize,
    pub canvas_height: usize,
    /// Class `i` renders `shapes[i]`.
    pub shapes: Vec<ShapeKind>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Maximum relative aspect deviation: `w = s (1 + a)`, `h = s (1 - a)`, `|a| <= aspect_jitter`.
    pub aspect_jitter: f64,
    /// Per-pixel uniform noise amplitude.
    pub color_jitter: f32,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            canvas_width: 64,
            canvas_height: 64,
            shapes: ShapeKind::ALL.to_vec(),
            min_objects: 1,
            max_objects: 4,
            min_size: 10,
            max_size: 22,
            aspect_jitter: 0.2,
            color_jitter: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() {
            return Err(Error::Dataset("synthetic spec has no shapes".into()));
        }
        if self.min_objects > self.max_objects || self.min_size > self.max_size {
            return Err(Error::Dataset("synthetic spec ranges are not ordered".into()));
        }
        if self.min_size < 3 {
            return Err(Error::Dataset("minimum object size must be at least 3 px".into()));
        }
        if self.max_objects > 0
            && (self.canvas_width < self.min_size + 2 || self.canvas_height < self.min_size + 2)
        {
            return Err(Error::Dataset(format!(
                "canvas {}x{} is too small for objects of {} px",
                self.canvas_width, self.canvas_height, self.min_size
            )));
        }
        if !(0.0..1.0).contains(&self.aspect_jitter) {
            return Err(Error::Dataset("aspect_jitter must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: Image,
    /// `(tight box, class index into spec.shapes)`
    pub objects: Vec<(BBox, usize)>,
}

struct Placement {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Placement {
    fn conflicts(&self, other: &Placement) -> bool {
        // keep one free pixel between rectangles
        let (ax1, ay1) = (self.x as i64 - 1, self.y as i64 - 1);
        let (ax2, ay2) = ((self.x + self.w) as i64 + 1, (self.y + self.h) as i64 + 1);
        let (bx1, by1) = (other.x as i64, other.y as i64);
        let (bx2, by2) = ((other.x + other.w) as i64, (other.y + other.h) as i64);
        ax1 < bx2 && bx1 < ax2 && ay1 < by2 && by1 < ay2
    }
}

pub fn generate_synthetic_scene<R: Rng>(spec: &SyntheticSceneSpec, rng: &mut R) -> Result<SyntheticScene> {
    spec.validate()?;
    let (cw, ch) = (spec.canvas_width, spec.canvas_height);
    let bg: [f32; 3] = [
        rng.random_range(0.0..0.3),
        rng.random_range(0.0..0.3),
        rng.random_range(0.0..0.3),
    ];
    let mut image = Image::new(cw, ch);
    for y in 0..ch {
        for x in 0..cw {
            let px = bg.map(|c| c + noise(rng, spec.color_jitter));
            image.put_pixel(x, y, px);
        }
    }

    let n_objects = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<Placement> = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..n_objects {
        let class = rng.random_range(0..spec.shapes.len());
        let shape = spec.shapes[class];
        let size = rng.random_range(spec.min_size..=spec.max_size) as f64;
        let a = if spec.aspect_jitter > 0.0 {
            rng.random_range(-spec.aspect_jitter..=spec.aspect_jitter)
        } else {
            0.0
        };
        let w = ((size * (1.0 + a)).round() as usize).clamp(3, cw - 2);
        let h = ((size * (1.0 - a)).round() as usize).clamp(3, ch - 2);
        let color: [f32; 3] = [
            rng.random_range(0.5..1.0),
            rng.random_range(0.5..1.0),
            rng.random_range(0.5..1.0),
        ];
        let mut spot = None;
        for _ in 0..100 {
            let cand = Placement {
                x: rng.random_range(0..=cw - w),
                y: rng.random_range(0..=ch - h),
                w,
                h,
            };
            if placed.iter().all(|p| !cand.conflicts(p)) {
                spot = Some(cand);
                break;
            }
        }
        let Some(p) = spot else { continue };

        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for j in 0..p.h {
            for i in 0..p.w {
                let u = (i as f64 + 0.5) / p.w as f64;
                let v = (j as f64 + 0.5) / p.h as f64;
                if shape.contains(u, v) {
                    let (x, y) = (p.x + i, p.y + j);
                    image.put_pixel(x, y, color.map(|c| c + noise(rng, spec.color_jitter)));
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        if x1 == usize::MAX {
            continue;
        }
        objects.push((BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64), class));
        placed.push(p);
    }
    image.clamp01();
    Ok(SyntheticScene { image, objects })
}

fn noise<R: Rng>(rng: &mut R, amp: f32) -> f32 {
    if amp > 0.0 {
        rng.random_range(-amp..=amp)
    } else {
        0.0
    }
}

/// Renders `n_images` scenes as a COCO-style dataset. Image ids run from 1;
/// category id `i + 1` is `spec.shapes[i]`. Pixels are 8-bit quantized.
pub fn generate_synthetic_dataset(spec: &SyntheticSceneSpec, n_images: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let categories = spec
        .shapes
        .iter()
        .enumerate()
        .map(|(i, s)| Category {
            id: i as u64 + 1,
            name: s.name().to_string(),
        })
        .collect();
    let mut images = Vec::with_capacity(n_images);
    let mut annotations = Vec::new();
    let mut pixels = std::collections::BTreeMap::new();
    let mut next_ann = 1u64;
    for i in 0..n_images {
        let id = i as u64 + 1;
        let scene = generate_synthetic_scene(spec, &mut rng)?;
        images.push(ImageRecord {
            id,
            file_name: format!("images/{id:06}.png"),
            width: spec.canvas_width as u32,
            height: spec.canvas_height as u32,
        });
        for (bbox, class) in scene.objects {
            annotations.push(Annotation {
                id: next_ann,
                image_id: id,
                bbox,
                category_id: class as u64 + 1,
            });
            next_ann += 1;
        }
        // 8-bit quantized, so a saved and reloaded dataset is pixel-identical
        pixels.insert(id, Image::from_rgb8(&scene.image.to_rgb8()));
    }
    Ok(Dataset {
        index: DatasetIndex::new(images, annotations, categories)?,
        pixels,
    })
}
