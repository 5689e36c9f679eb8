//! Region proposal network head, proposal decoding, anchor assignment and
//! the objectness/regression losses.

use rand::seq::index::sample;
use rand::Rng;

use super::anchors::Anchors;
use super::boxcoder::{decode, encode};
use super::nn::{conv2d, conv2d_backward, l1_grad, relu_backward_inplace, relu_inplace, sigmoid, ConvShape, FeatureMap};
use super::{DetectorConfig, DetectorParams};
use crate::geometry::{iou, nms, BBox, ScoredBox};

pub const RPN_DELTA_STDS: [f64; 4] = [1.0; 4];

#[derive(Debug, Clone)]
pub struct RpnOutput {
    hidden: Vec<FeatureMap>,
    /// `A x H x W` logits per level.
    pub objectness: Vec<FeatureMap>,
    /// `4A x H x W` deltas per level.
    pub deltas: Vec<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct RpnGrad {
    pub objectness: Vec<FeatureMap>,
    pub deltas: Vec<FeatureMap>,
}

impl RpnGrad {
    pub fn zeros(out: &RpnOutput) -> Self {
        RpnGrad {
            objectness: out.objectness.iter().map(FeatureMap::zeros_like).collect(),
            deltas: out.deltas.iter().map(FeatureMap::zeros_like).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.objectness.iter_mut().chain(self.deltas.iter_mut()) {
            for v in &mut m.data {
                *v *= s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &RpnGrad) {
        for (a, b) in self.objectness.iter_mut().zip(&other.objectness) {
            a.add_assign(b);
        }
        for (a, b) in self.deltas.iter_mut().zip(&other.deltas) {
            a.add_assign(b);
        }
    }
}

fn shapes(config: &DetectorConfig) -> (ConvShape, ConvShape, ConvShape) {
    let a = config.anchors_per_location();
    let r = config.rpn_channels;
    (
        ConvShape {
            in_channels: config.neck_channels,
            out_channels: r,
            kernel: 3,
            stride: 1,
            pad: 1,
        },
        ConvShape {
            in_channels: r,
            out_channels: a,
            kernel: 1,
            stride: 1,
            pad: 0,
        },
        ConvShape {
            in_channels: r,
            out_channels: 4 * a,
            kernel: 1,
            stride: 1,
            pad: 0,
        },
    )
}

pub fn rpn_forward(params: &DetectorParams, levels: &[FeatureMap]) -> RpnOutput {
    let (sc, so, sd) = shapes(&params.config);
    let mut out = RpnOutput {
        hidden: Vec::new(),
        objectness: Vec::new(),
        deltas: Vec::new(),
    };
    for level in levels {
        let mut h = conv2d(level, params.get("rpn.conv.weight"), params.get("rpn.conv.bias"), &sc);
        relu_inplace(&mut h.data);
        out.objectness.push(conv2d(
            &h,
            params.get("rpn.objectness.weight"),
            params.get("rpn.objectness.bias"),
            &so,
        ));
        out.deltas.push(conv2d(&h, params.get("rpn.deltas.weight"), params.get("rpn.deltas.bias"), &sd));
        out.hidden.push(h);
    }
    out
}

/// Accumulates RPN parameter gradients; returns per-level input gradients.
pub fn rpn_backward(
    params: &DetectorParams,
    levels: &[FeatureMap],
    out: &RpnOutput,
    grad: &RpnGrad,
    grads: &mut DetectorParams,
) -> Vec<FeatureMap> {
    let (sc, so, sd) = shapes(&params.config);
    let mut dlevels = Vec::with_capacity(levels.len());
    for (l, level) in levels.iter().enumerate() {
        let h = &out.hidden[l];
        let mut dh = {
            let (dw, db) = grads.layer_mut("rpn.objectness");
            conv2d_backward(h, params.get("rpn.objectness.weight"), &so, &grad.objectness[l], dw, db)
        };
        let dh2 = {
            let (dw, db) = grads.layer_mut("rpn.deltas");
            conv2d_backward(h, params.get("rpn.deltas.weight"), &sd, &grad.deltas[l], dw, db)
        };
        dh.add_assign(&dh2);
        relu_backward_inplace(&h.data, &mut dh.data);
        let (dw, db) = grads.layer_mut("rpn.conv");
        dlevels.push(conv2d_backward(level, params.get("rpn.conv.weight"), &sc, &dh, dw, db));
    }
    dlevels
}

impl RpnOutput {
    pub fn logit(&self, anchors: &Anchors, index: usize) -> f64 {
        let (l, _, _, _) = anchors.locate(index);
        self.objectness[l].data[index - anchors.levels[l].offset]
    }

    fn delta_index(anchors: &Anchors, index: usize) -> (usize, [usize; 4]) {
        let (l, a, y, x) = anchors.locate(index);
        let lv = &anchors.levels[l];
        let plane = lv.height * lv.width;
        let base = a * 4 * plane + y * lv.width + x;
        (l, [base, base + plane, base + 2 * plane, base + 3 * plane])
    }

    pub fn anchor_deltas(&self, anchors: &Anchors, index: usize) -> [f64; 4] {
        let (l, idx) = Self::delta_index(anchors, index);
        idx.map(|i| self.deltas[l].data[i])
    }

    /// Decoded, clipped, NMS-filtered proposals, best first.
    pub fn proposals(&self, anchors: &Anchors, config: &DetectorConfig, width: f64, height: f64, top_n: usize) -> Vec<ScoredBox> {
        let mut candidates = Vec::new();
        for (l, lv) in anchors.levels.iter().enumerate() {
            let logits = &self.objectness[l].data;
            let mut order: Vec<usize> = (0..lv.len()).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            order.truncate(config.rpn_pre_nms_top_n);
            for r in order {
                let i = lv.offset + r;
                let b = decode(&anchors.boxes[i], self.anchor_deltas(anchors, i), RPN_DELTA_STDS).clip(width, height);
                if b.width() >= config.min_proposal_size && b.height() >= config.min_proposal_size {
                    candidates.push(ScoredBox::new(b, sigmoid(logits[r]), 0));
                }
            }
        }
        let keep = nms(&candidates, config.rpn_nms_iou);
        keep.into_iter().take(top_n).map(|i| candidates[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnSample {
    pub anchor: usize,
    pub positive: bool,
    /// Regression target for positives.
    pub target: [f64; 4],
}

/// Labels anchors against `gt` and draws a class-balanced minibatch.
pub fn rpn_targets<R: Rng>(anchors: &Anchors, gt: &[BBox], config: &DetectorConfig, rng: &mut R) -> Vec<RpnSample> {
    let n = anchors.len();
    let mut best = vec![(f64::NEG_INFINITY, usize::MAX); n];
    let mut gt_best = vec![0.0f64; gt.len()];
    let mut overlaps = vec![0.0; n * gt.len()];
    for (i, a) in anchors.boxes.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let o = iou(a, g);
            overlaps[i * gt.len() + j] = o;
            if o > best[i].0 {
                best[i] = (o, j);
            }
            gt_best[j] = gt_best[j].max(o);
        }
    }
    let mut label: Vec<Option<bool>> = best
        .iter()
        .map(|&(o, _)| {
            if gt.is_empty() || o < config.rpn_neg_iou {
                Some(false)
            } else if o >= config.rpn_pos_iou {
                Some(true)
            } else {
                None
            }
        })
        .collect();
    let mut assigned: Vec<usize> = best.iter().map(|b| b.1).collect();
    for (j, &gb) in gt_best.iter().enumerate() {
        if gb < config.rpn_neg_iou || gb <= 0.0 {
            continue;
        }
        for i in 0..n {
            if overlaps[i * gt.len() + j] == gb {
                label[i] = Some(true);
                assigned[i] = j;
            }
        }
    }
    let pos: Vec<usize> = (0..n).filter(|&i| label[i] == Some(true)).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| label[i] == Some(false)).collect();
    let max_pos = (config.rpn_batch as f64 * config.rpn_pos_fraction) as usize;
    let n_pos = pos.len().min(max_pos);
    let n_neg = neg.len().min(config.rpn_batch - n_pos);
    let mut chosen_pos: Vec<usize> = sample(rng, pos.len(), n_pos).into_iter().map(|k| pos[k]).collect();
    let mut chosen_neg: Vec<usize> = sample(rng, neg.len(), n_neg).into_iter().map(|k| neg[k]).collect();
    chosen_pos.sort_unstable();
    chosen_neg.sort_unstable();
    let mut out: Vec<RpnSample> = chosen_pos
        .into_iter()
        .map(|i| RpnSample {
            anchor: i,
            positive: true,
            target: encode(&anchors.boxes[i], &gt[assigned[i]], RPN_DELTA_STDS),
        })
        .collect();
    out.extend(chosen_neg.into_iter().map(|i| RpnSample {
        anchor: i,
        positive: false,
        target: [0.0; 4],
    }));
    out
}

#[derive(Debug, Clone)]
pub struct RpnLoss {
    pub cls: f64,
    pub reg: f64,
    pub grad: RpnGrad,
}

/// Mean binary cross-entropy over the samples and positive-anchor L1
/// regression normalized by the sample count.
pub fn rpn_loss(out: &RpnOutput, anchors: &Anchors, samples: &[RpnSample]) -> RpnLoss {
    let mut grad = RpnGrad::zeros(out);
    if samples.is_empty() {
        return RpnLoss { cls: 0.0, reg: 0.0, grad };
    }
    let n = samples.len() as f64;
    let (mut cls, mut reg) = (0.0, 0.0);
    for s in samples {
        let (l, _, _, _) = anchors.locate(s.anchor);
        let r = s.anchor - anchors.levels[l].offset;
        let z = out.objectness[l].data[r];
        let y = if s.positive { 1.0 } else { 0.0 };
        // log(1 + exp(-|z|)) + max(z, 0) - y z
        cls += (-z.abs()).exp().ln_1p() + z.max(0.0) - y * z;
        grad.objectness[l].data[r] += (sigmoid(z) - y) / n;
        if s.positive {
            let (_, idx) = RpnOutput::delta_index(anchors, s.anchor);
            for (k, &i) in idx.iter().enumerate() {
                let d = out.deltas[l].data[i] - s.target[k];
                reg += d.abs();
                grad.deltas[l].data[i] += l1_grad(d) / n;
            }
        }
    }
    RpnLoss {
        cls: cls / n,
        reg: reg / n,
        grad,
    }
}
