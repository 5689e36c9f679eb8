//! Two-stage detector: strided conv backbone, two-level pyramid neck,
//! region proposal network and a decoupled RoI head.
//!
//! The background class always occupies the last logit index and box
//! regression is class-agnostic.

pub mod anchors;
pub mod boxcoder;
pub mod checkpoint;
pub mod model;
pub mod nn;
pub mod roi;
pub mod rpn;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ScoredBox};
use crate::image::Image;

pub use checkpoint::Checkpoint;
pub use model::ImagePass;
pub use roi::{roi_loss, RoiLoss, RoiTarget};

/// Pyramid level strides, finest first.
pub const LEVEL_STRIDES: [f64; 2] = [4.0, 8.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Output channels of the four stride-2 backbone stages.
    pub backbone_channels: [usize; 4],
    pub neck_channels: usize,
    pub rpn_channels: usize,
    /// Anchor side lengths per pyramid level; every level needs the same count.
    pub anchor_sizes: [Vec<f64>; 2],
    /// Height / width ratios.
    pub anchor_ratios: Vec<f64>,
    pub roi_bins: usize,
    pub roi_sampling: usize,
    /// RoIs with `sqrt(area)` below this (image pixels) pool from the finer level.
    pub roi_level_threshold: f64,
    pub head_hidden: usize,
    pub rpn_pre_nms_top_n: usize,
    pub rpn_post_nms_top_n: usize,
    pub rpn_nms_iou: f64,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub roi_fg_iou: f64,
    /// Proposals handed to the RoI sampler during training.
    pub roi_train_proposals: usize,
    /// Proposals classified at inference.
    pub roi_test_proposals: usize,
    pub roi_delta_stds: [f64; 4],
    pub score_threshold: f64,
    pub detection_nms_iou: f64,
    pub max_detections: usize,
    pub min_proposal_size: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backbone_channels: [12, 16, 32, 48],
            neck_channels: 24,
            rpn_channels: 24,
            anchor_sizes: [vec![10.0, 16.0], vec![24.0, 36.0]],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            roi_bins: 4,
            roi_sampling: 2,
            roi_level_threshold: 20.0,
            head_hidden: 64,
            rpn_pre_nms_top_n: 600,
            rpn_post_nms_top_n: 1000,
            rpn_nms_iou: 0.7,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 128,
            rpn_pos_fraction: 0.5,
            roi_batch: 64,
            roi_fg_fraction: 0.25,
            roi_fg_iou: 0.5,
            roi_train_proposals: 256,
            roi_test_proposals: 100,
            roi_delta_stds: [0.1, 0.1, 0.2, 0.2],
            score_threshold: 0.05,
            detection_nms_iou: 0.5,
            max_detections: 100,
            min_proposal_size: 1.0,
        }
    }
}

impl DetectorConfig {
    /// A network small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        DetectorConfig {
            backbone_channels: [2, 2, 2, 2],
            neck_channels: 2,
            rpn_channels: 2,
            anchor_sizes: [vec![8.0], vec![16.0]],
            anchor_ratios: vec![1.0],
            roi_bins: 2,
            head_hidden: 4,
            rpn_batch: 32,
            roi_batch: 16,
            ..Self::default()
        }
    }

    pub fn anchors_per_location(&self) -> usize {
        self.anchor_sizes[0].len() * self.anchor_ratios.len()
    }

    pub fn roi_feature_len(&self) -> usize {
        self.neck_channels * self.roi_bins * self.roi_bins
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.backbone_channels.contains(&0)
            || self.neck_channels == 0
            || self.rpn_channels == 0
            || self.head_hidden == 0
        {
            return bad("detector channel counts must be positive".into());
        }
        if self.anchor_sizes[0].is_empty() || self.anchor_sizes[0].len() != self.anchor_sizes[1].len() {
            return bad("anchor_sizes must list the same nonzero count per level".into());
        }
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|r| *r <= 0.0) {
            return bad("anchor_ratios must be positive".into());
        }
        if self.roi_bins == 0 || self.roi_sampling == 0 {
            return bad("roi_bins and roi_sampling must be positive".into());
        }
        if !(self.rpn_neg_iou <= self.rpn_pos_iou) {
            return bad("rpn_neg_iou must not exceed rpn_pos_iou".into());
        }
        for (name, v) in [
            ("rpn_pos_fraction", self.rpn_pos_fraction),
            ("roi_fg_fraction", self.roi_fg_fraction),
            ("roi_fg_iou", self.roi_fg_iou),
            ("rpn_nms_iou", self.rpn_nms_iou),
            ("detection_nms_iou", self.detection_nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.roi_delta_stds.iter().any(|s| *s <= 0.0) {
            return bad("roi_delta_stds must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Neck,
    Rpn,
    RoiClassifier,
    RoiRegressor,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::Neck,
        ParamGroup::Rpn,
        ParamGroup::RoiClassifier,
        ParamGroup::RoiRegressor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Neck => "neck",
            ParamGroup::Rpn => "rpn",
            ParamGroup::RoiClassifier => "roi_classifier",
            ParamGroup::RoiRegressor => "roi_regressor",
        }
    }

    pub fn of(param_name: &str) -> Option<ParamGroup> {
        let prefix = param_name.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.name() == prefix)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of parameter groups that receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupMask([bool; 5]);

impl GroupMask {
    pub fn all() -> Self {
        GroupMask([true; 5])
    }

    pub fn none() -> Self {
        GroupMask([false; 5])
    }

    pub fn only(groups: &[ParamGroup]) -> Self {
        let mut m = Self::none();
        for &g in groups {
            m.0[g as usize] = true;
        }
        m
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        self.0[g as usize]
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL.into_iter().filter(|g| self.contains(*g)).collect()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|b| *b)
    }

    /// True when anything upstream of the RoI head features is trainable.
    pub fn needs_features(&self) -> bool {
        self.contains(ParamGroup::Backbone) || self.contains(ParamGroup::Neck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named parameter arrays. Gradients use the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub config: DetectorConfig,
    /// Foreground classes plus background.
    pub num_classes: usize,
    pub tensors: BTreeMap<String, Tensor>,
}

fn conv_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.weight"), format!("{prefix}.bias"))
}

impl DetectorParams {
    /// Layout of every parameter as `(name, shape, init std)`; a zero std marks a zero-initialized bias.
    fn layout(config: &DetectorConfig, num_classes: usize) -> Vec<(String, Vec<usize>, f64)> {
        let mut out = Vec::new();
        let mut conv = |prefix: &str, cout: usize, cin: usize, k: usize, std: Option<f64>| {
            let (w, b) = conv_names(prefix);
            let fan_in = (cin * k * k) as f64;
            out.push((w, vec![cout, cin * k * k], std.unwrap_or((2.0 / fan_in).sqrt())));
            out.push((b, vec![cout], 0.0));
        };
        let mut cin = 3;
        for (i, &c) in config.backbone_channels.iter().enumerate() {
            conv(&format!("backbone.stage{}", i + 1), c, cin, 3, None);
            cin = c;
        }
        let n = config.neck_channels;
        for (i, &c) in config.backbone_channels.iter().enumerate().skip(1) {
            conv(&format!("neck.lateral{}", i + 1), n, c, 1, Some((1.0 / c as f64).sqrt()));
        }
        let a = config.anchors_per_location();
        conv("rpn.conv", config.rpn_channels, n, 3, None);
        conv("rpn.objectness", a, config.rpn_channels, 1, Some(0.01));
        conv("rpn.deltas", 4 * a, config.rpn_channels, 1, Some(0.01));
        let f = config.roi_feature_len();
        let h = config.head_hidden;
        conv("roi_classifier.fc", h, f, 1, None);
        conv("roi_classifier.out", num_classes, h, 1, Some(0.01));
        conv("roi_regressor.fc", h, f, 1, None);
        conv("roi_regressor.out", 4, h, 1, Some(0.001));
        out
    }

    pub fn init<R: Rng>(config: &DetectorConfig, num_classes: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Config("a detector needs at least one foreground class".into()));
        }
        let tensors = Self::layout(config, num_classes)
            .into_iter()
            .map(|(name, shape, std)| {
                let t = if std == 0.0 {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::normal(&shape, std, rng)
                };
                (name, t)
            })
            .collect();
        Ok(DetectorParams {
            config: config.clone(),
            num_classes,
            tensors,
        })
    }

    pub fn zeros_like(&self) -> Self {
        DetectorParams {
            config: self.config.clone(),
            num_classes: self.num_classes,
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn background_index(&self) -> usize {
        self.num_classes - 1
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .data
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .data
    }

    /// Mutable weight and bias of one layer at once.
    pub fn layer_mut(&mut self, prefix: &str) -> (&mut [f64], &mut [f64]) {
        let (w, b) = conv_names(prefix);
        let mut wt = None;
        let mut bt = None;
        for (k, t) in self.tensors.iter_mut() {
            if *k == w {
                wt = Some(&mut t.data[..]);
            } else if *k == b {
                bt = Some(&mut t.data[..]);
            }
        }
        (
            wt.unwrap_or_else(|| panic!("missing parameter {w}")),
            bt.unwrap_or_else(|| panic!("missing parameter {b}")),
        )
    }

    pub fn names_in(&self, group: ParamGroup) -> Vec<&str> {
        self.tensors
            .keys()
            .filter(|k| ParamGroup::of(k) == Some(group))
            .map(String::as_str)
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Errors unless `other` has the same parameter names and shapes.
    pub fn check_aligned(&self, other: &DetectorParams) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Shape(format!(
                "parameter count differs: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, ta), (kb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || ta.shape != tb.shape {
                return Err(Error::Shape(format!(
                    "parameter {ka} {:?} does not match {kb} {:?}",
                    ta.shape, tb.shape
                )));
            }
        }
        Ok(())
    }

    /// True when every tensor of `group` is bitwise equal in both.
    pub fn group_bitwise_eq(&self, other: &DetectorParams, group: ParamGroup) -> bool {
        self.names_in(group).into_iter().all(|n| {
            let (a, b) = (self.get(n), other.tensors.get(n).map(|t| &t.data[..]));
            b.is_some_and(|b| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
        })
    }

    pub fn group_norm(&self, group: ParamGroup) -> f64 {
        self.names_in(group)
            .into_iter()
            .flat_map(|n| self.get(n).iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Grows the classifier output from `num_classes` to `new_num_classes`.
    /// Existing foreground rows keep their index, the background row moves
    /// to the new last index, and inserted rows are drawn from `N(0, std)`.
    pub fn extend_classes<R: Rng>(&self, new_num_classes: usize, std: f64, rng: &mut R) -> Result<Self> {
        if new_num_classes < self.num_classes {
            return Err(Error::Shape(format!(
                "cannot shrink classifier from {} to {new_num_classes} classes",
                self.num_classes
            )));
        }
        let mut out = self.clone();
        out.num_classes = new_num_classes;
        let h = self.config.head_hidden;
        let old_fg = self.num_classes - 1;
        let added = new_num_classes - self.num_classes;
        let w = self.get("roi_classifier.out.weight");
        let b = self.get("roi_classifier.out.bias");
        let fresh = Tensor::normal(&[added.max(1), h], std.max(f64::MIN_POSITIVE), rng);
        let mut nw = Vec::with_capacity(new_num_classes * h);
        nw.extend_from_slice(&w[..old_fg * h]);
        nw.extend_from_slice(&fresh.data[..added * h]);
        nw.extend_from_slice(&w[old_fg * h..]);
        let mut nb = Vec::with_capacity(new_num_classes);
        nb.extend_from_slice(&b[..old_fg]);
        nb.extend(std::iter::repeat_n(0.0, added));
        nb.push(b[old_fg]);
        out.tensors.insert(
            "roi_classifier.out.weight".into(),
            Tensor {
                shape: vec![new_num_classes, h],
                data: nw,
            },
        );
        out.tensors.insert(
            "roi_classifier.out.bias".into(),
            Tensor {
                shape: vec![new_num_classes],
                data: nb,
            },
        );
        Ok(out)
    }
}

/// Per-proposal classification logits and decoded boxes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoIPrediction {
    /// `C_total` logits per proposal, background last.
    pub logits: Vec<Vec<f64>>,
    /// Raw class-agnostic regression output per proposal.
    pub deltas: Vec<[f64; 4]>,
    /// Deltas decoded against the input proposals.
    pub boxes: Vec<BBox>,
}

impl RoIPrediction {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// Class-agnostic proposals sorted by descending objectness, post-NMS.
pub fn forward_rpn(params: &DetectorParams, image: &Image) -> Vec<ScoredBox> {
    let pass = ImagePass::forward(params, image);
    pass.proposals(params, params.config.rpn_post_nms_top_n)
}

/// RoI head outputs for `proposals` in the given order.
pub fn forward_roi(params: &DetectorParams, image: &Image, proposals: &[BBox]) -> RoIPrediction {
    if proposals.is_empty() {
        return RoIPrediction::default();
    }
    let pass = ImagePass::forward(params, image);
    pass.roi_forward(params, proposals).0
}

/// `(L_cls, L_reg)` of the RoI head against per-proposal targets.
pub fn supervised_loss(pred: &RoIPrediction, targets: &[RoiTarget]) -> (f64, f64) {
    let l = roi_loss(pred, targets);
    (l.cls, l.reg)
}

pub fn top_n_proposals(proposals: &[ScoredBox], n: usize) -> Vec<ScoredBox> {
    proposals[..n.min(proposals.len())].to_vec()
}

/// Final detections; `class_id` is the head's foreground index.
pub fn detect(params: &DetectorParams, image: &Image) -> Vec<ScoredBox> {
    let pass = ImagePass::forward(params, image);
    pass.detect(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn groups_partition_all_parameters() {
        let p = DetectorParams::init(&DetectorConfig::default(), 7, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut total = 0;
        for g in ParamGroup::ALL {
            let names = p.names_in(g);
            assert!(!names.is_empty(), "{g}");
            total += names.len();
        }
        assert_eq!(total, p.tensors.len());
        assert!(p.is_finite());
    }

    #[test]
    fn tiny_network_fits_gradient_check_budget() {
        let p = DetectorParams::init(&DetectorConfig::tiny(), 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.num_parameters() <= 1000, "{}", p.num_parameters());
    }

    #[test]
    fn extending_classes_keeps_existing_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = DetectorParams::init(&DetectorConfig::default(), 7, &mut rng).unwrap();
        let q = p.extend_classes(9, 0.01, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let h = p.config.head_hidden;
        let (w, nw) = (p.get("roi_classifier.out.weight"), q.get("roi_classifier.out.weight"));
        assert_eq!(nw.len(), 9 * h);
        assert_eq!(&nw[..6 * h], &w[..6 * h]);
        assert_eq!(&nw[8 * h..], &w[6 * h..]);
        assert_eq!(q.get("roi_classifier.out.bias")[8], p.get("roi_classifier.out.bias")[6]);
        let again = p.extend_classes(9, 0.01, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(q, again);
        assert!(p.extend_classes(5, 0.01, &mut rng).is_err());
        for g in [ParamGroup::Backbone, ParamGroup::RoiRegressor] {
            assert!(p.group_bitwise_eq(&q, g));
        }
    }

    #[test]
    fn top_n_truncates() {
        let props: Vec<ScoredBox> = (0..600)
            .map(|i| ScoredBox::new(BBox::new(0.0, 0.0, 1.0, 1.0), 1.0 - i as f64 / 600.0, 0))
            .collect();
        assert_eq!(top_n_proposals(&props, 512).len(), 512);
        assert_eq!(top_n_proposals(&props[..10], 512).len(), 10);
        assert!(top_n_proposals(&props, 0).is_empty());
    }

    #[test]
    fn group_names() {
        assert_eq!(ParamGroup::of("roi_classifier.fc.weight"), Some(ParamGroup::RoiClassifier));
        assert_eq!(ParamGroup::of("bogus.weight"), None);
        let m = GroupMask::only(&[ParamGroup::RoiClassifier]);
        assert_eq!(m.groups(), vec![ParamGroup::RoiClassifier]);
        assert!(!m.needs_features());
        assert!(GroupMask::none().is_empty());
    }
}
