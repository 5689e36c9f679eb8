//! Mean-teacher machinery: EMA teacher updates, thresholded pseudo labels
//! with box-jitter refinement, and the soft-weighted unsupervised RoI loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::roi::{assign_rois, RoiAssignment};
use crate::detector::{boxcoder, roi_loss, DetectorParams, GroupMask, ImagePass, RoIPrediction, RoiLoss, RoiTarget};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ScoredBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiSupConfig {
    /// Minimum teacher score of a pseudo label.
    pub tau_cls: f64,
    /// Maximum mean normalized jitter deviation for a box to act as a regression target.
    pub tau_var: f64,
    pub n_jitter: usize,
    /// Jitter amplitude as a fraction of box width/height.
    pub jitter_scale: f64,
    pub ema_momentum: f64,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        SemiSupConfig {
            tau_cls: 0.9,
            tau_var: 0.02,
            n_jitter: 10,
            jitter_scale: 0.06,
            ema_momentum: 0.999,
        }
    }
}

impl SemiSupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!("ema_momentum {} outside [0, 1]", self.ema_momentum)));
        }
        if self.tau_var < 0.0 || self.jitter_scale < 0.0 {
            return Err(Error::Config("tau_var and jitter_scale must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Teacher-view coordinates.
    pub bbox: BBox,
    /// Foreground head index.
    pub class_id: usize,
    pub score: f64,
    /// Per-coordinate jitter standard deviation, normalized by the refined box size.
    pub box_variance: [f64; 4],
}

impl PseudoLabel {
    pub fn uncertainty(&self) -> f64 {
        self.box_variance.iter().sum::<f64>() / 4.0
    }

    pub fn regresses(&self, tau_var: f64) -> bool {
        self.uncertainty() <= tau_var
    }
}

/// Detections at or above the classification threshold, order preserved.
pub fn select_confident(detections: &[ScoredBox], tau_cls: f64) -> Vec<ScoredBox> {
    detections.iter().filter(|d| d.score >= tau_cls).copied().collect()
}

/// Teacher inference on the weak view, thresholding, then jitter refinement.
pub fn generate_pseudo_labels<R: Rng>(
    teacher: &DetectorParams,
    weak: &ImagePass,
    config: &SemiSupConfig,
    rng: &mut R,
) -> Vec<PseudoLabel> {
    let kept = select_confident(&weak.detect(teacher), config.tau_cls);
    kept.into_iter()
        .map(|d| {
            let (bbox, box_variance) = box_jitter_refine(teacher, weak, &d.bbox, config.n_jitter, config.jitter_scale, rng);
            PseudoLabel {
                bbox,
                class_id: d.class_id,
                score: d.score,
                box_variance,
            }
        })
        .collect()
}

/// Regresses `n_jitter` perturbed copies of `b` with the teacher's RoI head.
pub fn box_jitter_refine<R: Rng>(
    teacher: &DetectorParams,
    weak: &ImagePass,
    b: &BBox,
    n_jitter: usize,
    scale: f64,
    rng: &mut R,
) -> (BBox, [f64; 4]) {
    let (w, h) = (weak.width as f64, weak.height as f64);
    let regress = |boxes: &[BBox]| -> Vec<BBox> {
        let (pred, _) = weak.roi_forward(teacher, boxes);
        pred.boxes
    };
    jitter_refine_with(regress, b, n_jitter, scale, w, h, rng)
}

/// Jitter refinement against an arbitrary box regressor.
pub fn jitter_refine_with<R: Rng>(
    regress: impl Fn(&[BBox]) -> Vec<BBox>,
    b: &BBox,
    n_jitter: usize,
    scale: f64,
    width: f64,
    height: f64,
    rng: &mut R,
) -> (BBox, [f64; 4]) {
    if n_jitter == 0 {
        return (regress(&[*b])[0], [0.0; 4]);
    }
    let (bw, bh) = (b.width(), b.height());
    let amp = [bw * scale, bh * scale, bw * scale, bh * scale];
    let jittered: Vec<BBox> = (0..n_jitter)
        .map(|_| {
            let mut c = b.to_array();
            for k in 0..4 {
                if amp[k] > 0.0 {
                    c[k] += rng.random_range(-amp[k]..amp[k]);
                }
            }
            let j = BBox::from_array(c).clip(width, height);
            if j.width() > 0.0 && j.height() > 0.0 {
                j
            } else {
                *b
            }
        })
        .collect();
    let out = regress(&jittered);
    jitter_statistics(&out)
}

/// Mean box and per-coordinate population standard deviation normalized by
/// the mean box width/height (each at least one pixel).
pub fn jitter_statistics(boxes: &[BBox]) -> (BBox, [f64; 4]) {
    let n = boxes.len() as f64;
    let mut mean = [0.0; 4];
    for b in boxes {
        for (m, v) in mean.iter_mut().zip(b.to_array()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 4];
    for b in boxes {
        for (k, v) in b.to_array().iter().enumerate() {
            var[k] += (v - mean[k]).powi(2) / n;
        }
    }
    let refined = BBox::from_array(mean);
    let (w, h) = (refined.width().max(1.0), refined.height().max(1.0));
    let norm = [w, h, w, h];
    let mut unc = [0.0; 4];
    for k in 0..4 {
        unc[k] = var[k].sqrt() / norm[k];
    }
    (refined, unc)
}

/// Targets of the unsupervised RoI loss. `rois` are student-view boxes,
/// `pseudo` is already mapped into the student view, and `teacher_bg[i]` is
/// the teacher's background probability for roi `i`.
pub fn soft_targets(
    assignment: &RoiAssignment,
    pseudo: &[PseudoLabel],
    teacher_bg: &[f64],
    background: usize,
    config: &SemiSupConfig,
    delta_stds: [f64; 4],
) -> Vec<RoiTarget> {
    assignment
        .rois
        .iter()
        .zip(&assignment.matched)
        .zip(teacher_bg)
        .map(|((r, m), &bg)| match m {
            Some(j) => {
                let p = &pseudo[*j];
                RoiTarget {
                    label: p.class_id,
                    weight: 1.0,
                    deltas: p
                        .regresses(config.tau_var)
                        .then(|| boxcoder::encode(r, &p.bbox, delta_stds)),
                }
            }
            None => RoiTarget {
                label: background,
                weight: bg,
                deltas: None,
            },
        })
        .collect()
}

/// Assigns student RoIs to pseudo boxes with the supervised IoU rule.
pub fn assign_to_pseudo<R: Rng>(
    proposals: &[BBox],
    pseudo: &[PseudoLabel],
    params: &DetectorParams,
    rng: Option<&mut R>,
) -> RoiAssignment {
    let boxes: Vec<BBox> = pseudo.iter().map(|p| p.bbox).collect();
    assign_rois(proposals, &boxes, &params.config, rng)
}

/// Soft-weighted classification and low-variance regression against pseudo targets.
pub fn unsup_soft_loss(pred: &RoIPrediction, targets: &[RoiTarget]) -> RoiLoss {
    roi_loss(pred, targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub teacher: DetectorParams,
    pub momentum: f64,
}

impl EmaState {
    pub fn new(teacher: DetectorParams, momentum: f64) -> Self {
        EmaState { teacher, momentum }
    }

    /// `teacher <- m * teacher + (1 - m) * student` on the groups in `mask`.
    pub fn update(&mut self, student: &DetectorParams, mask: GroupMask) -> Result<()> {
        self.teacher.check_aligned(student)?;
        let m = self.momentum;
        for g in mask.groups() {
            for name in student.names_in(g) {
                let s = student.get(name);
                for (t, &s) in self.teacher.get_mut(name).iter_mut().zip(s) {
                    *t = m * *t + (1.0 - m) * s;
                }
            }
        }
        Ok(())
    }
}

pub fn ema_update(state: &mut EmaState, student: &DetectorParams) -> Result<()> {
    state.update(student, GroupMask::all())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64) -> DetectorParams {
        DetectorParams::init(&DetectorConfig::tiny(), 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let b = BBox::new(0.0, 0.0, 5.0, 5.0);
        let dets = [ScoredBox::new(b, 0.95, 0), ScoredBox::new(b, 0.85, 1)];
        let kept = select_confident(&dets, 0.9);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.95);
        assert!(select_confident(&dets, 1.0 + 1e-9).is_empty());
    }

    #[test]
    fn scalar_ema() {
        let mut s = params(0);
        for t in s.tensors.values_mut() {
            t.data.fill(0.0);
        }
        let mut t = params(1);
        for x in t.tensors.values_mut() {
            x.data.fill(1.0);
        }
        let mut state = EmaState::new(t.clone(), 0.999);
        ema_update(&mut state, &s).unwrap();
        assert!(state.teacher.tensors.values().all(|x| x.data.iter().all(|v| (v - 0.999).abs() < 1e-15)));
        let mut frozen = EmaState::new(t.clone(), 1.0);
        ema_update(&mut frozen, &s).unwrap();
        assert_eq!(frozen.teacher, t);
        s.tensors.remove("rpn.conv.bias");
        assert!(ema_update(&mut state, &s).is_err());
    }

    #[test]
    fn zero_jitter_returns_the_regressed_box() {
        let b = BBox::new(2.0, 2.0, 10.0, 12.0);
        let shifted = |bs: &[BBox]| bs.iter().map(|b| b.translate(1.0, 0.0)).collect::<Vec<_>>();
        let (r, v) = jitter_refine_with(shifted, &b, 0, 0.06, 64.0, 64.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r, b.translate(1.0, 0.0));
        assert_eq!(v, [0.0; 4]);
    }

    #[test]
    fn constant_regressor_has_zero_variance() {
        let fixed = BBox::new(5.0, 5.0, 15.0, 20.0);
        let constant = |bs: &[BBox]| vec![fixed; bs.len()];
        let (r, v) = jitter_refine_with(constant, &BBox::new(3.0, 3.0, 20.0, 20.0), 10, 0.06, 64.0, 64.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(r, fixed);
        assert_eq!(v, [0.0; 4]);
    }

    #[test]
    fn variance_matches_direct_recomputation() {
        let mut seen = std::cell::RefCell::new(Vec::new());
        let identity = |bs: &[BBox]| {
            seen.borrow_mut().extend_from_slice(bs);
            bs.to_vec()
        };
        let (r, v) = jitter_refine_with(identity, &BBox::new(10.0, 10.0, 30.0, 40.0), 10, 0.06, 64.0, 64.0, &mut ChaCha8Rng::seed_from_u64(2));
        let boxes = seen.get_mut().clone();
        assert_eq!(boxes.len(), 10);
        for k in 0..4 {
            let vals: Vec<f64> = boxes.iter().map(|b| b.to_array()[k]).collect();
            let mean = vals.iter().sum::<f64>() / 10.0;
            let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 10.0).sqrt();
            assert!((r.to_array()[k] - mean).abs() < 1e-12);
            let size = if k % 2 == 0 { r.width() } else { r.height() };
            assert!((v[k] - sd / size).abs() < 1e-12);
            // jitter stays within 6% of the source box side
            let side = if k % 2 == 0 { 20.0 } else { 30.0 };
            assert!(vals.iter().all(|x| (x - BBox::new(10.0, 10.0, 30.0, 40.0).to_array()[k]).abs() <= 0.06 * side));
        }
    }

    #[test]
    fn background_only_soft_targets_reduce_to_plain_cross_entropy() {
        let rois = vec![BBox::new(0.0, 0.0, 4.0, 4.0), BBox::new(5.0, 5.0, 9.0, 9.0)];
        let a = RoiAssignment {
            rois: rois.clone(),
            matched: vec![None, None],
        };
        let t = soft_targets(&a, &[], &[1.0, 1.0], 2, &SemiSupConfig::default(), [0.1, 0.1, 0.2, 0.2]);
        let pred = RoIPrediction {
            logits: vec![vec![0.3, -0.1, 0.5], vec![1.0, 0.0, -1.0]],
            deltas: vec![[0.0; 4]; 2],
            boxes: rois,
        };
        let l = unsup_soft_loss(&pred, &t);
        let ce: f64 = pred
            .logits
            .iter()
            .map(|z| -crate::detector::nn::log_softmax(z)[2])
            .sum::<f64>()
            / 2.0;
        assert!((l.cls - ce).abs() < 1e-12);
        assert_eq!(l.reg, 0.0);
    }

    #[test]
    fn hand_built_two_proposal_soft_loss() {
        // roi 0 matches a low-variance pseudo box of class 0, roi 1 is
        // background with teacher background probability 0.4
        let rois = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(30.0, 30.0, 40.0, 40.0)];
        let pseudo = [PseudoLabel {
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            class_id: 0,
            score: 0.95,
            box_variance: [0.0; 4],
        }];
        let params = params(0);
        let a = assign_to_pseudo::<ChaCha8Rng>(&rois, &pseudo, &params, None);
        let a = RoiAssignment {
            rois: a.rois[..2].to_vec(),
            matched: a.matched[..2].to_vec(),
        };
        let t = soft_targets(&a, &pseudo, &[0.9, 0.4], 2, &SemiSupConfig::default(), [0.1, 0.1, 0.2, 0.2]);
        let pred = RoIPrediction {
            logits: vec![vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]],
            deltas: vec![[0.1, 0.0, 0.0, -0.2], [0.0; 4]],
            boxes: rois,
        };
        let l = unsup_soft_loss(&pred, &t);
        let ce0 = -(2.0f64.exp() / (2.0f64.exp() + 2.0)).ln();
        let ce1 = -(1.0f64.exp() / (1.0f64.exp() + 2.0)).ln();
        assert!((l.cls - (ce0 + 0.4 * ce1) / 1.4).abs() < 1e-12);
        assert!((l.reg - 0.3 / 2.0).abs() < 1e-12);
    }
}
