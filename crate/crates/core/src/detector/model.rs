use rand::Rng;

use super::anchors::Anchors;
use super::nn::{conv2d, conv2d_backward, relu_backward_inplace, relu_inplace, softmax, upsample2, upsample2_backward, ConvShape, FeatureMap};
use super::roi::{roi_head_backward, roi_head_forward, RoiCache};
use super::rpn::{rpn_backward, rpn_forward, rpn_loss, rpn_targets, RpnGrad, RpnLoss, RpnOutput};
use super::{DetectorParams, GroupMask, ParamGroup, RoIPrediction, LEVEL_STRIDES};
use crate::geometry::{batched_nms, BBox, ScoredBox};
use crate::image::Image;

fn stage_shape(cin: usize, cout: usize) -> ConvShape {
    ConvShape {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride: 2,
        pad: 1,
    }
}

fn lateral_shape(cin: usize, cout: usize) -> ConvShape {
    ConvShape {
        in_channels: cin,
        out_channels: cout,
        kernel: 1,
        stride: 1,
        pad: 0,
    }
}

/// Upstream gradients of one RoI head evaluation.
pub struct RoiGrad<'a> {
    pub cache: &'a RoiCache,
    pub dlogits: &'a [Vec<f64>],
    pub ddeltas: &'a [[f64; 4]],
}

/// Activations of one image through backbone, neck and RPN, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct ImagePass {
    pub width: usize,
    pub height: usize,
    input: FeatureMap,
    /// Post-ReLU outputs of the four backbone stages.
    stages: Vec<FeatureMap>,
    /// Pyramid levels, finest first.
    pub levels: Vec<FeatureMap>,
    pub rpn: RpnOutput,
    pub anchors: Anchors,
}

impl ImagePass {
    pub fn forward(params: &DetectorParams, image: &Image) -> Self {
        let cfg = &params.config;
        let mut input = FeatureMap::zeros(3, image.height, image.width);
        for (d, s) in input.data.iter_mut().zip(&image.data) {
            *d = *s as f64 - 0.5;
        }
        let mut stages: Vec<FeatureMap> = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &c) in cfg.backbone_channels.iter().enumerate() {
            let x = if i == 0 { &input } else { &stages[i - 1] };
            let p = format!("backbone.stage{}", i + 1);
            let mut y = conv2d(x, params.get(&format!("{p}.weight")), params.get(&format!("{p}.bias")), &stage_shape(cin, c));
            relu_inplace(&mut y.data);
            stages.push(y);
            cin = c;
        }
        let n = cfg.neck_channels;
        let lateral = |i: usize| {
            let p = format!("neck.lateral{}", i + 1);
            conv2d(
                &stages[i],
                params.get(&format!("{p}.weight")),
                params.get(&format!("{p}.bias")),
                &lateral_shape(cfg.backbone_channels[i], n),
            )
        };
        let top = lateral(3);
        let mut p3 = lateral(2);
        p3.add_assign(&upsample2(&top, p3.height, p3.width));
        let mut p2 = lateral(1);
        p2.add_assign(&upsample2(&p3, p2.height, p2.width));
        let levels = vec![p2, p3];
        let rpn = rpn_forward(params, &levels);
        let shapes: Vec<(usize, usize)> = levels.iter().map(|l| (l.height, l.width)).collect();
        let anchors = Anchors::generate(&shapes, &LEVEL_STRIDES, &cfg.anchor_sizes, &cfg.anchor_ratios);
        ImagePass {
            width: image.width,
            height: image.height,
            input,
            stages,
            levels,
            rpn,
            anchors,
        }
    }

    pub fn proposals(&self, params: &DetectorParams, top_n: usize) -> Vec<ScoredBox> {
        self.rpn
            .proposals(&self.anchors, &params.config, self.width as f64, self.height as f64, top_n)
    }

    pub fn rpn_loss<R: Rng>(&self, params: &DetectorParams, gt: &[BBox], rng: &mut R) -> RpnLoss {
        let samples = rpn_targets(&self.anchors, gt, &params.config, rng);
        rpn_loss(&self.rpn, &self.anchors, &samples)
    }

    pub fn roi_forward(&self, params: &DetectorParams, rois: &[BBox]) -> (RoIPrediction, RoiCache) {
        roi_head_forward(params, &self.levels, rois)
    }

    /// Inference detections with the head's foreground index as `class_id`.
    pub fn detect(&self, params: &DetectorParams) -> Vec<ScoredBox> {
        let cfg = &params.config;
        let proposals: Vec<BBox> = self
            .proposals(params, cfg.roi_test_proposals)
            .into_iter()
            .map(|p| p.bbox)
            .collect();
        if proposals.is_empty() {
            return Vec::new();
        }
        let (pred, _) = self.roi_forward(params, &proposals);
        let bg = params.background_index();
        let mut dets = Vec::new();
        for (z, b) in pred.logits.iter().zip(&pred.boxes) {
            let b = b.clip(self.width as f64, self.height as f64);
            if !(b.width() > 0.0 && b.height() > 0.0) {
                continue;
            }
            let p = softmax(z);
            for (c, &s) in p.iter().enumerate().take(bg) {
                if s >= cfg.score_threshold {
                    dets.push(ScoredBox::new(b, s, c));
                }
            }
        }
        let keep = batched_nms(&dets, cfg.detection_nms_iou);
        let mut out: Vec<ScoredBox> = keep.into_iter().map(|i| dets[i]).collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.truncate(cfg.max_detections);
        out
    }

    /// Backpropagates RPN and RoI head gradients into `grads`. Groups outside
    /// `mask` may still receive values; only the stages needed to reach the
    /// trainable groups are evaluated.
    pub fn backward(
        &self,
        params: &DetectorParams,
        rpn_grad: Option<&RpnGrad>,
        roi_grads: &[RoiGrad<'_>],
        mask: GroupMask,
        grads: &mut DetectorParams,
    ) {
        let features = mask.needs_features();
        let mut dlevels: Vec<FeatureMap> = self.levels.iter().map(FeatureMap::zeros_like).collect();
        if let Some(g) = rpn_grad {
            if features || mask.contains(ParamGroup::Rpn) {
                let d = rpn_backward(params, &self.levels, &self.rpn, g, grads);
                for (a, b) in dlevels.iter_mut().zip(&d) {
                    a.add_assign(b);
                }
            }
        }
        let head = mask.contains(ParamGroup::RoiClassifier) || mask.contains(ParamGroup::RoiRegressor);
        if head || features {
            for r in roi_grads {
                roi_head_backward(
                    params,
                    r.cache,
                    r.dlogits,
                    r.ddeltas,
                    grads,
                    if features { Some(&mut dlevels[..]) } else { None },
                );
            }
        }
        if !features {
            return;
        }
        let cfg = &params.config;
        let n = cfg.neck_channels;
        let dp2 = dlevels.remove(0);
        let mut dp3 = dlevels.remove(0);
        dp3.add_assign(&upsample2_backward(&dp2, dp3.height, dp3.width));
        let dtop = upsample2_backward(&dp3, self.stages[3].height, self.stages[3].width);
        let mut dstages: Vec<FeatureMap> = Vec::with_capacity(4);
        dstages.push(FeatureMap::zeros_like(&self.stages[0]));
        for (i, d) in [(1usize, &dp2), (2, &dp3), (3, &dtop)] {
            let p = format!("neck.lateral{}", i + 1);
            let (dw, db) = grads.layer_mut(&p);
            dstages.push(conv2d_backward(
                &self.stages[i],
                params.get(&format!("{p}.weight")),
                &lateral_shape(cfg.backbone_channels[i], n),
                d,
                dw,
                db,
            ));
        }
        if !mask.contains(ParamGroup::Backbone) {
            return;
        }
        let mut carry: Option<FeatureMap> = None;
        for i in (0..4).rev() {
            let mut d = std::mem::replace(&mut dstages[i], FeatureMap::zeros(0, 0, 0));
            if let Some(c) = carry.take() {
                d.add_assign(&c);
            }
            relu_backward_inplace(&self.stages[i].data, &mut d.data);
            let x = if i == 0 { &self.input } else { &self.stages[i - 1] };
            let cin = if i == 0 { 3 } else { cfg.backbone_channels[i - 1] };
            let p = format!("backbone.stage{}", i + 1);
            let (dw, db) = grads.layer_mut(&p);
            let dx = conv2d_backward(x, params.get(&format!("{p}.weight")), &stage_shape(cin, cfg.backbone_channels[i]), &d, dw, db);
            if i > 0 {
                carry = Some(dx);
            }
        }
    }
}
