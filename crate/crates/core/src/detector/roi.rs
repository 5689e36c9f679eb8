//! RoI pooling, the decoupled classification/regression head, proposal
//! assignment and the head losses.

use rand::seq::index::sample;
use rand::Rng;

use super::boxcoder::{decode, encode};
use super::nn::{l1_grad, linear, linear_backward, log_softmax, relu_backward_inplace, relu_inplace, roi_align, roi_align_backward, softmax, FeatureMap, RoiAlignShape};
use super::{DetectorConfig, DetectorParams, RoIPrediction, LEVEL_STRIDES};
use crate::geometry::{iou, BBox};

/// Training target of one RoI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    /// Class index; the background index for unmatched RoIs.
    pub label: usize,
    /// Weight of the classification term.
    pub weight: f64,
    /// Encoded regression target, present for foreground RoIs that regress.
    pub deltas: Option<[f64; 4]>,
}

/// Pyramid level a box pools from.
pub fn roi_level(b: &BBox, config: &DetectorConfig) -> usize {
    if b.area().max(0.0).sqrt() < config.roi_level_threshold {
        0
    } else {
        1
    }
}

fn feature_box(b: &BBox, level: usize) -> [f64; 4] {
    let s = LEVEL_STRIDES[level];
    [b.x1 / s - 0.5, b.y1 / s - 0.5, b.x2 / s - 0.5, b.y2 / s - 0.5]
}

#[derive(Debug, Clone)]
pub struct RoiCache {
    rois: Vec<BBox>,
    levels: Vec<usize>,
    pooled: Vec<f64>,
    hidden_cls: Vec<f64>,
    hidden_reg: Vec<f64>,
}

pub fn roi_head_forward(params: &DetectorParams, levels: &[FeatureMap], rois: &[BBox]) -> (RoIPrediction, RoiCache) {
    let cfg = &params.config;
    let shape = RoiAlignShape {
        bins: cfg.roi_bins,
        sampling: cfg.roi_sampling,
    };
    let n = rois.len();
    let f = cfg.roi_feature_len();
    let mut pooled = Vec::with_capacity(n * f);
    let mut lvls = Vec::with_capacity(n);
    for b in rois {
        let l = roi_level(b, cfg);
        lvls.push(l);
        pooled.extend(roi_align(&levels[l], feature_box(b, l), &shape));
    }
    let mut hidden_cls = linear(&pooled, n, params.get("roi_classifier.fc.weight"), params.get("roi_classifier.fc.bias"));
    relu_inplace(&mut hidden_cls);
    let logits = linear(&hidden_cls, n, params.get("roi_classifier.out.weight"), params.get("roi_classifier.out.bias"));
    let mut hidden_reg = linear(&pooled, n, params.get("roi_regressor.fc.weight"), params.get("roi_regressor.fc.bias"));
    relu_inplace(&mut hidden_reg);
    let deltas = linear(&hidden_reg, n, params.get("roi_regressor.out.weight"), params.get("roi_regressor.out.bias"));

    let c = params.num_classes;
    let deltas: Vec<[f64; 4]> = deltas.chunks_exact(4).map(|d| [d[0], d[1], d[2], d[3]]).collect();
    let pred = RoIPrediction {
        logits: logits.chunks_exact(c).map(<[f64]>::to_vec).collect(),
        boxes: rois
            .iter()
            .zip(&deltas)
            .map(|(r, d)| decode(r, *d, cfg.roi_delta_stds))
            .collect(),
        deltas,
    };
    let cache = RoiCache {
        rois: rois.to_vec(),
        levels: lvls,
        pooled,
        hidden_cls,
        hidden_reg,
    };
    (pred, cache)
}

/// Accumulates head gradients; when `dlevels` is given, also the pooled
/// feature gradients.
pub fn roi_head_backward(
    params: &DetectorParams,
    cache: &RoiCache,
    dlogits: &[Vec<f64>],
    ddeltas: &[[f64; 4]],
    grads: &mut DetectorParams,
    dlevels: Option<&mut [FeatureMap]>,
) {
    let n = cache.rois.len();
    if n == 0 {
        return;
    }
    let dz: Vec<f64> = dlogits.iter().flatten().copied().collect();
    let dd: Vec<f64> = ddeltas.iter().flatten().copied().collect();
    let mut dh_cls = {
        let (dw, db) = grads.layer_mut("roi_classifier.out");
        linear_backward(&cache.hidden_cls, n, params.get("roi_classifier.out.weight"), &dz, dw, db)
    };
    relu_backward_inplace(&cache.hidden_cls, &mut dh_cls);
    let mut dx = {
        let (dw, db) = grads.layer_mut("roi_classifier.fc");
        linear_backward(&cache.pooled, n, params.get("roi_classifier.fc.weight"), &dh_cls, dw, db)
    };
    let mut dh_reg = {
        let (dw, db) = grads.layer_mut("roi_regressor.out");
        linear_backward(&cache.hidden_reg, n, params.get("roi_regressor.out.weight"), &dd, dw, db)
    };
    relu_backward_inplace(&cache.hidden_reg, &mut dh_reg);
    let dx_reg = {
        let (dw, db) = grads.layer_mut("roi_regressor.fc");
        linear_backward(&cache.pooled, n, params.get("roi_regressor.fc.weight"), &dh_reg, dw, db)
    };
    let Some(dlevels) = dlevels else {
        return;
    };
    for (a, b) in dx.iter_mut().zip(&dx_reg) {
        *a += b;
    }
    let cfg = &params.config;
    let shape = RoiAlignShape {
        bins: cfg.roi_bins,
        sampling: cfg.roi_sampling,
    };
    let f = cfg.roi_feature_len();
    for (i, b) in cache.rois.iter().enumerate() {
        let l = cache.levels[i];
        roi_align_backward(&mut dlevels[l], feature_box(b, l), &shape, &dx[i * f..(i + 1) * f]);
    }
}

/// RoIs with their assignment: `matched[i]` is the ground-truth index of a
/// foreground RoI.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiAssignment {
    pub rois: Vec<BBox>,
    pub matched: Vec<Option<usize>>,
}

/// Appends `gt` to `proposals`, labels each candidate by its best overlap
/// and, when `rng` is given, draws a minibatch with a bounded foreground share.
pub fn assign_rois<R: Rng>(proposals: &[BBox], gt: &[BBox], config: &DetectorConfig, rng: Option<&mut R>) -> RoiAssignment {
    let candidates: Vec<BBox> = proposals.iter().chain(gt).copied().collect();
    let matched: Vec<Option<usize>> = candidates
        .iter()
        .map(|c| {
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gt.iter().enumerate() {
                let o = iou(c, g);
                if best.is_none_or(|(bo, _)| o > bo) {
                    best = Some((o, j));
                }
            }
            best.filter(|(o, _)| *o >= config.roi_fg_iou).map(|(_, j)| j)
        })
        .collect();
    let Some(rng) = rng else {
        return RoiAssignment {
            rois: candidates,
            matched,
        };
    };
    let fg: Vec<usize> = (0..candidates.len()).filter(|&i| matched[i].is_some()).collect();
    let bg: Vec<usize> = (0..candidates.len()).filter(|&i| matched[i].is_none()).collect();
    let n_fg = fg.len().min((config.roi_batch as f64 * config.roi_fg_fraction) as usize);
    let n_bg = bg.len().min(config.roi_batch - n_fg);
    let mut pick_fg: Vec<usize> = sample(rng, fg.len(), n_fg).into_iter().map(|k| fg[k]).collect();
    let mut pick_bg: Vec<usize> = sample(rng, bg.len(), n_bg).into_iter().map(|k| bg[k]).collect();
    pick_fg.sort_unstable();
    pick_bg.sort_unstable();
    let keep: Vec<usize> = pick_fg.into_iter().chain(pick_bg).collect();
    RoiAssignment {
        rois: keep.iter().map(|&i| candidates[i]).collect(),
        matched: keep.iter().map(|&i| matched[i]).collect(),
    }
}

impl RoiAssignment {
    /// Supervised targets: matched RoIs take their box's class and regress
    /// toward it, the rest are background.
    pub fn targets(&self, gt: &[BBox], gt_labels: &[usize], background: usize, config: &DetectorConfig) -> Vec<RoiTarget> {
        self.rois
            .iter()
            .zip(&self.matched)
            .map(|(r, m)| match m {
                Some(j) => RoiTarget {
                    label: gt_labels[*j],
                    weight: 1.0,
                    deltas: Some(encode(r, &gt[*j], config.roi_delta_stds)),
                },
                None => RoiTarget {
                    label: background,
                    weight: 1.0,
                    deltas: None,
                },
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiLoss {
    pub cls: f64,
    pub reg: f64,
    pub dlogits: Vec<Vec<f64>>,
    pub ddeltas: Vec<[f64; 4]>,
}

/// Weighted cross-entropy normalized by `max(sum of weights, 1)` plus L1 on
/// the regression targets normalized by the RoI count.
pub fn roi_loss(pred: &RoIPrediction, targets: &[RoiTarget]) -> RoiLoss {
    assert_eq!(pred.len(), targets.len(), "one target per prediction");
    let n = targets.len();
    let mut out = RoiLoss {
        cls: 0.0,
        reg: 0.0,
        dlogits: pred.logits.iter().map(|z| vec![0.0; z.len()]).collect(),
        ddeltas: vec![[0.0; 4]; n],
    };
    if n == 0 {
        return out;
    }
    let norm = targets.iter().map(|t| t.weight).sum::<f64>().max(1.0);
    for (i, t) in targets.iter().enumerate() {
        let z = &pred.logits[i];
        if t.weight != 0.0 {
            out.cls -= t.weight * log_softmax(z)[t.label] / norm;
            let p = softmax(z);
            for (c, d) in out.dlogits[i].iter_mut().enumerate() {
                let y = if c == t.label { 1.0 } else { 0.0 };
                *d = t.weight * (p[c] - y) / norm;
            }
        }
        if let Some(target) = t.deltas {
            for k in 0..4 {
                let d = pred.deltas[i][k] - target[k];
                out.reg += d.abs() / n as f64;
                out.ddeltas[i][k] = l1_grad(d) / n as f64;
            }
        }
    }
    out
}
