//! Entropy regression: consistency between student and teacher RoI outputs
//! on the same proposals seen through two augmented views.

use serde::{Deserialize, Serialize};

use crate::augment::{relate_views, AugmentedView};
use crate::detector::nn::{log_softmax, softmax};
use crate::error::{Error, Result};
use crate::geometry::{apply_affine, giou_with_grad, iou_with_grad, AffineTransform, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMeasure {
    CrossEntropy,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMeasure {
    Iou,
    Giou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntRegConfig {
    pub similarity: SimilarityMeasure,
    pub overlap: OverlapMeasure,
    /// `beta = beta_multiplier * alpha`.
    pub beta_multiplier: f64,
    /// Student proposals per unlabeled image.
    pub top_n: usize,
    /// Student-view boxes whose clipped area falls below this are dropped.
    pub min_pair_area: f64,
}

impl Default for EntRegConfig {
    fn default() -> Self {
        EntRegConfig {
            similarity: SimilarityMeasure::CrossEntropy,
            overlap: OverlapMeasure::Iou,
            beta_multiplier: 2.0,
            top_n: 512,
            min_pair_area: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalPair {
    pub p_s: BBox,
    pub p_t: BBox,
    /// teacher view -> student view
    pub m: AffineTransform,
}

/// Maps original-image proposals into both views.
pub fn pair_proposals(
    source: &[BBox],
    student: &AugmentedView,
    teacher: &AugmentedView,
    min_area: f64,
) -> Result<Vec<ProposalPair>> {
    let m = relate_views(student, teacher)?;
    let (sw, sh) = (student.image.width as f64, student.image.height as f64);
    Ok(source
        .iter()
        .map(|p| ProposalPair {
            p_s: apply_affine(&student.transform, p),
            p_t: apply_affine(&teacher.transform, p),
            m,
        })
        .filter(|pair| {
            let c = pair.p_s.clip(sw, sh);
            c.width() > 0.0 && c.height() > 0.0 && c.area() >= min_area
        })
        .collect())
}

/// `w_i = 1` when the teacher's argmax is not the last (background) index;
/// ties go to the lower index.
pub fn foreground_weights(z_t: &[Vec<f64>]) -> Vec<bool> {
    z_t.iter()
        .map(|z| {
            let mut best = 0;
            for (c, v) in z.iter().enumerate() {
                if *v > z[best] {
                    best = c;
                }
            }
            best + 1 != z.len()
        })
        .collect()
}

/// Weighted mean of `H(z_s, z_t)` over foreground pairs and its gradient
/// with respect to the student logits. Teacher logits receive no gradient.
pub fn entropy_similarity_loss(
    z_s: &[Vec<f64>],
    z_t: &[Vec<f64>],
    mask: &[bool],
    measure: SimilarityMeasure,
) -> (f64, Vec<Vec<f64>>) {
    assert_eq!(z_s.len(), z_t.len());
    assert_eq!(z_s.len(), mask.len());
    let mut grad: Vec<Vec<f64>> = z_s.iter().map(|z| vec![0.0; z.len()]).collect();
    let total: f64 = mask.iter().filter(|w| **w).count() as f64;
    if total == 0.0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for i in 0..z_s.len() {
        if !mask[i] {
            continue;
        }
        let c = z_s[i].len() as f64;
        let q = softmax(&z_t[i]);
        let log_p = log_softmax(&z_s[i]);
        let mut h = -q.iter().zip(&log_p).map(|(q, lp)| q * lp).sum::<f64>() / c;
        if measure == SimilarityMeasure::Kl {
            let log_q = log_softmax(&z_t[i]);
            h += q.iter().zip(&log_q).map(|(q, lq)| if *q > 0.0 { q * lq } else { 0.0 }).sum::<f64>() / c;
        }
        loss += h / total;
        for (k, g) in grad[i].iter_mut().enumerate() {
            *g = (log_p[k].exp() - q[k]) / (c * total);
        }
    }
    (loss, grad)
}

/// `1 - (1/|p|) * sum_i w_i * overlap(r_s_i, m_i(r_t_i))` and its gradient
/// with respect to the student boxes.
pub fn iou_consistency_loss(
    pairs: &[ProposalPair],
    r_s: &[BBox],
    r_t: &[BBox],
    mask: &[bool],
    overlap: OverlapMeasure,
) -> (f64, Vec<[f64; 4]>) {
    assert_eq!(pairs.len(), r_s.len());
    assert_eq!(pairs.len(), r_t.len());
    assert_eq!(pairs.len(), mask.len());
    let mut grad = vec![[0.0; 4]; pairs.len()];
    if !mask.iter().any(|w| *w) {
        return (0.0, grad);
    }
    let n = pairs.len() as f64;
    let mut sum = 0.0;
    for i in 0..pairs.len() {
        if !mask[i] {
            continue;
        }
        let target = apply_affine(&pairs[i].m, &r_t[i]);
        let (o, g) = match overlap {
            OverlapMeasure::Iou => iou_with_grad(&r_s[i], &target),
            OverlapMeasure::Giou => giou_with_grad(&r_s[i], &target),
        };
        sum += o;
        for k in 0..4 {
            grad[i][k] = -g[k] / n;
        }
    }
    (1.0 - sum / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    /// `alpha = |b_u| / |b_l|`, `beta = beta_multiplier * alpha`.
    pub fn from_batch(labeled: usize, unlabeled: usize, beta_multiplier: f64) -> Self {
        let alpha = unlabeled as f64 / labeled.max(1) as f64;
        LossWeights {
            alpha,
            beta: beta_multiplier * alpha,
        }
    }
}

pub fn total_loss(l_sup: f64, l_soft: f64, l_ent: f64, l_iou: f64, w: LossWeights) -> Result<f64> {
    for (name, v) in [("L_sup", l_sup), ("L_soft", l_soft), ("L_ent", l_ent), ("L_iou", l_iou)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                step: None,
                detail: format!("{name} = {v} (L_sup {l_sup}, L_soft {l_soft}, L_ent {l_ent}, L_iou {l_iou})"),
            });
        }
    }
    Ok(l_sup + w.alpha * l_soft + w.beta * (l_ent + l_iou))
}
