use crate::geometry::BBox;

/// Anchors of all pyramid levels, flattened so that anchor `a` at cell
/// `(y, x)` of a level sits at `offset + (a * height + y) * width + x`,
/// matching the layout of the RPN output maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchors {
    pub boxes: Vec<BBox>,
    pub levels: Vec<AnchorLevel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorLevel {
    pub offset: usize,
    pub per_location: usize,
    pub height: usize,
    pub width: usize,
    pub stride: f64,
}

impl AnchorLevel {
    pub fn len(&self) -> usize {
        self.per_location * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Anchors {
    /// `sizes[l]` and `ratios` (height / width) span the anchors of level `l`.
    pub fn generate(level_shapes: &[(usize, usize)], strides: &[f64], sizes: &[Vec<f64>], ratios: &[f64]) -> Anchors {
        let mut boxes = Vec::new();
        let mut levels = Vec::new();
        for (l, &(h, w)) in level_shapes.iter().enumerate() {
            let stride = strides[l];
            let shapes: Vec<(f64, f64)> = sizes[l]
                .iter()
                .flat_map(|&s| ratios.iter().map(move |&r| (s / r.sqrt(), s * r.sqrt())))
                .collect();
            levels.push(AnchorLevel {
                offset: boxes.len(),
                per_location: shapes.len(),
                height: h,
                width: w,
                stride,
            });
            for &(aw, ah) in &shapes {
                for y in 0..h {
                    for x in 0..w {
                        let cx = (x as f64 + 0.5) * stride;
                        let cy = (y as f64 + 0.5) * stride;
                        boxes.push(BBox {
                            x1: cx - aw / 2.0,
                            y1: cy - ah / 2.0,
                            x2: cx + aw / 2.0,
                            y2: cy + ah / 2.0,
                        });
                    }
                }
            }
        }
        Anchors { boxes, levels }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `(level, anchor, y, x)` of a flat index.
    pub fn locate(&self, index: usize) -> (usize, usize, usize, usize) {
        let l = self
            .levels
            .iter()
            .rposition(|lv| lv.offset <= index)
            .expect("index within anchors");
        let lv = &self.levels[l];
        let r = index - lv.offset;
        let x = r % lv.width;
        let y = (r / lv.width) % lv.height;
        let a = r / (lv.width * lv.height);
        (l, a, y, x)
    }
}
