//! Boxes, overlap measures, affine transforms and non-maximum suppression.
//!
//! Boxes use corner format `(x1, y1, x2, y2)` in continuous pixel-edge
//! coordinates, so `width = x2 - x1` with no `+1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x2 >= x1 && y2 >= y1, "malformed box ({x1}, {y1}, {x2}, {y2})");
        BBox { x1, y1, x2, y2 }
    }

    /// Converts a COCO-style `(x, y, w, h)` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn to_xywh(self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x2 >= self.x1
            && self.y2 >= self.y1
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x1, self.y1),
            (self.x2, self.y1),
            (self.x2, self.y2),
            (self.x1, self.y2),
        ]
    }

    /// Clips to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        let x2 = self.x2.clamp(0.0, width);
        let y2 = self.y2.clamp(0.0, height);
        BBox {
            x1,
            y1,
            x2: x2.max(x1),
            y2: y2.max(y1),
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Smallest box enclosing both.
    pub fn hull(&self, other: &BBox) -> BBox {
        BBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

/// A detection or proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64, class_id: usize) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} outside [0, 1]");
        ScoredBox {
            bbox,
            score,
            class_id,
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let enclose = a.hull(b).area();
    if enclose <= 0.0 {
        return 0.0;
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (enclose - union) / enclose
}

/// Intermediate quantities shared by the IoU and GIoU gradients.
struct OverlapParts {
    inter: f64,
    union: f64,
    d_inter: [f64; 4],
    d_union: [f64; 4],
}

fn overlap_parts(a: &BBox, b: &BBox) -> OverlapParts {
    let (aw, ah) = (a.width(), a.height());
    let d_area_a = [-ah, -aw, ah, aw];

    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    let (inter, d_inter) = if iw > 0.0 && ih > 0.0 {
        let mut d = [0.0; 4];
        if a.x1 > b.x1 {
            d[0] = -ih;
        }
        if a.y1 > b.y1 {
            d[1] = -iw;
        }
        if a.x2 < b.x2 {
            d[2] = ih;
        }
        if a.y2 < b.y2 {
            d[3] = iw;
        }
        (iw * ih, d)
    } else {
        (0.0, [0.0; 4])
    };
    let union = a.area() + b.area() - inter;
    let mut d_union = [0.0; 4];
    for k in 0..4 {
        d_union[k] = d_area_a[k] - d_inter[k];
    }
    OverlapParts {
        inter,
        union,
        d_inter,
        d_union,
    }
}

/// IoU and its gradient with respect to the coordinates of `a`.
pub fn iou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let p = overlap_parts(a, b);
    if p.union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = (p.d_inter[k] * p.union - p.inter * p.d_union[k]) / (p.union * p.union);
    }
    (p.inter / p.union, g)
}

/// GIoU and its gradient with respect to the coordinates of `a`.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let hull = a.hull(b);
    let (ew, eh) = (hull.width(), hull.height());
    let enclose = ew * eh;
    if enclose <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let (iou, d_iou) = iou_with_grad(a, b);
    let p = overlap_parts(a, b);
    let mut d_enclose = [0.0; 4];
    if a.x1 < b.x1 {
        d_enclose[0] = -eh;
    }
    if a.y1 < b.y1 {
        d_enclose[1] = -ew;
    }
    if a.x2 > b.x2 {
        d_enclose[2] = eh;
    }
    if a.y2 > b.y2 {
        d_enclose[3] = ew;
    }
    // giou = iou - 1 + union / enclose
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = d_iou[k] + (p.d_union[k] * enclose - p.union * d_enclose[k]) / (enclose * enclose);
    }
    (iou - 1.0 + p.union / enclose, g)
}

/// 2D affine transform in homogeneous coordinates, row-major, last row `(0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 3],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub fn from_rows(a: f64, b: f64, tx: f64, c: f64, d: f64, ty: f64) -> Self {
        AffineTransform {
            m: [[a, b, tx], [c, d, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn identity() -> Self {
        Self::from_rows(1.0, 0.0, 0.0, 0.0, 1.0, 0.0)
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::from_rows(1.0, 0.0, tx, 0.0, 1.0, ty)
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self::from_rows(sx, 0.0, 0.0, 0.0, sy, 0.0)
    }

    /// Mirror about the vertical axis of an image of the given width: `x -> width - x`.
    pub fn hflip(width: f64) -> Self {
        Self::from_rows(-1.0, 0.0, width, 0.0, 1.0, 0.0)
    }

    /// Counter-clockwise rotation (in image coordinates, y down) about the origin.
    pub fn rotation(radians: f64) -> Self {
        let (s, c) = radians.sin_cos();
        Self::from_rows(c, -s, 0.0, s, c, 0.0)
    }

    /// `x -> x + tan(angle) * y`
    pub fn shear_x(radians: f64) -> Self {
        Self::from_rows(1.0, radians.tan(), 0.0, 0.0, 1.0, 0.0)
    }

    /// `y -> y + tan(angle) * x`
    pub fn shear_y(radians: f64) -> Self {
        Self::from_rows(1.0, 0.0, 0.0, radians.tan(), 1.0, 0.0)
    }

    /// Conjugates `self` so it acts about `(cx, cy)` instead of the origin.
    pub fn about(&self, cx: f64, cy: f64) -> Self {
        Self::translation(cx, cy)
            .compose(self)
            .compose(&Self::translation(-cx, -cy))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[r][k] * other.m[k][c]).sum();
            }
        }
        // keep the affine row exact
        m[2] = [0.0, 0.0, 1.0];
        AffineTransform { m }
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn is_invertible(&self) -> bool {
        let det = self.determinant();
        det.is_finite() && det.abs() > 1e-12
    }

    pub fn invert(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        if !self.is_invertible() {
            return Err(Error::Singular(det));
        }
        let [[a, b, tx], [c, d, ty], _] = self.m;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(Self::from_rows(
            ia,
            ib,
            -(ia * tx + ib * ty),
            ic,
            id,
            -(ic * tx + id * ty),
        ))
    }

    pub fn apply_point(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.m[0][2],
            self.m[1][0] * x + self.m[1][1] * y + self.m[1][2],
        )
    }

    pub fn approx_eq(&self, other: &AffineTransform, tol: f64) -> bool {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Axis-aligned hull of the four mapped corners of `b`.
pub fn apply_affine(m: &AffineTransform, b: &BBox) -> BBox {
    let mut out = BBox {
        x1: f64::INFINITY,
        y1: f64::INFINITY,
        x2: f64::NEG_INFINITY,
        y2: f64::NEG_INFINITY,
    };
    for (x, y) in b.corners() {
        let (u, v) = m.apply_point(x, y);
        out.x1 = out.x1.min(u);
        out.y1 = out.y1.min(v);
        out.x2 = out.x2.max(u);
        out.y2 = out.y2.max(v);
    }
    out
}

/// Indices ordered by descending score; ties keep the lower index first.
pub fn score_order(boxes: &[ScoredBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .score
            .partial_cmp(&boxes[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy non-maximum suppression. A box is dropped when its IoU with an
/// already kept, higher-ranked box exceeds `iou_threshold`. Returns kept
/// indices in descending score order.
pub fn nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(boxes) {
        let b = &boxes[i].bbox;
        if keep
            .iter()
            .all(|&k| iou(&boxes[k].bbox, b) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

/// NMS applied independently within each `class_id`; output sorted by score.
pub fn batched_nms(boxes: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(boxes) {
        let cand = &boxes[i];
        if keep.iter().all(|&k| {
            boxes[k].class_id != cand.class_id || iou(&boxes[k].bbox, &cand.bbox) <= iou_threshold
        }) {
            keep.push(i);
        }
    }
    keep
}
