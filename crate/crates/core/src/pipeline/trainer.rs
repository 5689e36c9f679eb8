//! One optimizer step: supervised loss on labeled images, pseudo-label soft
//! loss and entropy regression on unlabeled images, SGD, then EMA.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::log::StepLog;
use super::optim::{clip_global_norm, group_norms, masked_gradients, Sgd};
use super::{apply_freeze_policy, TrainingConfig};
use crate::augment::{augment, relate_views};
use crate::detector::boxcoder::decode_backward;
use crate::detector::model::RoiGrad;
use crate::detector::nn::softmax;
use crate::detector::roi::{assign_rois, RoiTarget};
use crate::detector::rpn::{rpn_loss, rpn_targets, RpnSample};
use crate::detector::{roi_loss, DetectorParams, GroupMask, ImagePass, ParamGroup, RoIPrediction};
use crate::entreg::{entropy_similarity_loss, foreground_weights, iou_consistency_loss, pair_proposals, total_loss, ProposalPair};
use crate::error::{Error, Result};
use crate::geometry::{apply_affine, BBox};
use crate::image::Image;
use crate::semisup::{generate_pseudo_labels, soft_targets, EmaState, PseudoLabel};

/// A labeled image with head-index labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct StageData {
    pub labeled: Vec<LabeledImage>,
    pub unlabeled: Vec<Image>,
}

// Independent streams keep each consumer's draws unaffected by the others,
// so dropping the unlabeled branch leaves the labeled trajectory intact.
const STREAM_LABELED_ORDER: u64 = 1;
const STREAM_LABELED_AUG: u64 = 2;
const STREAM_LABELED_SAMPLING: u64 = 3;
const STREAM_UNLABELED_ORDER: u64 = 4;
const STREAM_UNLABELED_AUG: u64 = 5;
const STREAM_UNLABELED_SAMPLING: u64 = 6;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Epoch-wise shuffled index cycle.
#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        Cycler {
            order: (0..len).collect(),
            pos: len,
            rng,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Maps boxes through `t`, clips to the view and drops those thinner than a pixel.
fn map_boxes(t: &crate::geometry::AffineTransform, boxes: &[BBox], labels: &[usize], w: f64, h: f64) -> (Vec<BBox>, Vec<usize>) {
    let mut ob = Vec::new();
    let mut ol = Vec::new();
    for (b, &l) in boxes.iter().zip(labels) {
        let m = apply_affine(t, b).clip(w, h);
        if m.width() >= 1.0 && m.height() >= 1.0 {
            ob.push(m);
            ol.push(l);
        }
    }
    (ob, ol)
}

fn rpn_trainable(mask: GroupMask) -> bool {
    mask.needs_features() || mask.contains(ParamGroup::Rpn)
}

/// Sampling decisions of one labeled image, fixed before any loss is taken.
#[derive(Debug, Clone)]
pub struct SupervisedPlan {
    /// RPN anchor samples; `None` when no RPN-side group trains.
    pub rpn_samples: Option<Vec<RpnSample>>,
    pub rois: Vec<BBox>,
    pub targets: Vec<RoiTarget>,
}

pub fn plan_supervised<R: Rng>(params: &DetectorParams, pass: &ImagePass, boxes: &[BBox], labels: &[usize], mask: GroupMask, rng: &mut R) -> SupervisedPlan {
    let cfg = &params.config;
    let rpn_samples = rpn_trainable(mask).then(|| rpn_targets(&pass.anchors, boxes, cfg, rng));
    let proposals: Vec<BBox> = pass
        .proposals(params, cfg.roi_train_proposals)
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    let assignment = assign_rois(&proposals, boxes, cfg, Some(rng));
    let targets = assignment.targets(boxes, labels, params.background_index(), cfg);
    SupervisedPlan {
        rpn_samples,
        rois: assignment.rois,
        targets,
    }
}

/// Loss of a fixed plan at `params`, whose forward pass is `pass`. With
/// `grads`, gradients scaled by `scale` are accumulated into it.
pub fn supervised_plan_loss(params: &DetectorParams, pass: &ImagePass, plan: &SupervisedPlan, mask: GroupMask, scale: f64, grads: Option<&mut DetectorParams>) -> f64 {
    let mut loss = 0.0;
    let rpn_grad = plan.rpn_samples.as_ref().map(|samples| {
        let mut l = rpn_loss(&pass.rpn, &pass.anchors, samples);
        loss += l.cls + l.reg;
        l.grad.scale(scale);
        l.grad
    });
    let (pred, cache) = pass.roi_forward(params, &plan.rois);
    let mut rl = roi_loss(&pred, &plan.targets);
    loss += rl.cls + rl.reg;
    if let Some(grads) = grads {
        rl.dlogits.iter_mut().flatten().for_each(|g| *g *= scale);
        rl.ddeltas.iter_mut().flatten().for_each(|g| *g *= scale);
        let roi = RoiGrad {
            cache: &cache,
            dlogits: &rl.dlogits,
            ddeltas: &rl.ddeltas,
        };
        pass.backward(params, rpn_grad.as_ref(), &[roi], mask, grads);
    }
    loss
}

/// Supervised RPN and RoI losses of one (already augmented) image. Gradients
/// scaled by `scale` are accumulated into `grads`; returns the unscaled loss.
#[allow(clippy::too_many_arguments)]
pub fn supervised_image_loss<R: Rng>(
    params: &DetectorParams,
    image: &Image,
    boxes: &[BBox],
    labels: &[usize],
    mask: GroupMask,
    scale: f64,
    rng: &mut R,
    grads: &mut DetectorParams,
) -> f64 {
    let pass = ImagePass::forward(params, image);
    let plan = plan_supervised(params, &pass, boxes, labels, mask, rng);
    supervised_plan_loss(params, &pass, &plan, mask, scale, Some(grads))
}

/// Unscaled unsupervised loss components of one unlabeled image.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UnlabeledLosses {
    pub cls_soft: f64,
    pub reg_soft: f64,
    pub ent: f64,
    pub iou: f64,
    pub pseudo_labels: usize,
    pub pairs: usize,
}

fn slice_prediction(pred: &RoIPrediction, range: std::ops::Range<usize>) -> RoIPrediction {
    RoIPrediction {
        logits: pred.logits[range.clone()].to_vec(),
        deltas: pred.deltas[range.clone()].to_vec(),
        boxes: pred.boxes[range].to_vec(),
    }
}

/// Everything the unlabeled losses of one image need besides the student:
/// both views, pseudo labels, sampled RoIs with soft targets, and the
/// teacher's outputs on the paired proposals.
#[derive(Debug, Clone)]
pub struct UnlabeledPlan {
    /// Student (strong) view.
    pub strong: Image,
    /// Pseudo labels mapped into the student view.
    pub pseudo: Vec<PseudoLabel>,
    pub rpn_samples: Option<Vec<RpnSample>>,
    /// Soft-loss RoIs, in the student view.
    pub rois: Vec<BBox>,
    pub targets: Vec<RoiTarget>,
    pub pairs: Vec<ProposalPair>,
    /// Teacher logits and decoded boxes on `pairs[i].p_t`.
    pub teacher_pairs: RoIPrediction,
    pub pair_weights: Vec<bool>,
}

/// Augments, runs the teacher and fixes every sampling decision. Returns the
/// plan and the student's forward pass on the strong view.
pub fn plan_unlabeled(
    student: &DetectorParams,
    teacher: &DetectorParams,
    image: &Image,
    config: &TrainingConfig,
    mask: GroupMask,
    aug_rng: &mut ChaCha8Rng,
    rng: &mut ChaCha8Rng,
) -> Result<(UnlabeledPlan, ImagePass)> {
    let cfg = &student.config;
    let bg = student.background_index();
    let weak = augment(image, &config.augment.weak, aug_rng)?;
    let strong = augment(image, &config.augment.strong, aug_rng)?;
    let (sw, sh) = (strong.image.width as f64, strong.image.height as f64);

    let tpass = ImagePass::forward(teacher, &weak.image);
    let pseudo_t = generate_pseudo_labels(teacher, &tpass, &config.semisup, rng);
    let m = relate_views(&strong, &weak)?;
    let m_inv = m.invert()?;
    let pseudo: Vec<PseudoLabel> = pseudo_t
        .iter()
        .filter_map(|p| {
            let b = apply_affine(&m, &p.bbox).clip(sw, sh);
            (b.width() >= 1.0 && b.height() >= 1.0).then_some(PseudoLabel { bbox: b, ..*p })
        })
        .collect();
    let pseudo_boxes: Vec<BBox> = pseudo.iter().map(|p| p.bbox).collect();

    // one proposal set from the original image, seen through both views
    let source: Vec<BBox> = ImagePass::forward(student, image)
        .proposals(student, config.entreg.top_n)
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    let pairs = pair_proposals(&source, &strong, &weak, config.entreg.min_pair_area)?;

    let spass = ImagePass::forward(student, &strong.image);
    let rpn_samples = rpn_trainable(mask).then(|| rpn_targets(&spass.anchors, &pseudo_boxes, cfg, &mut *rng));

    let candidates: Vec<BBox> = pairs.iter().map(|p| p.p_s.clip(sw, sh)).collect();
    let assignment = assign_rois(&candidates, &pseudo_boxes, cfg, Some(&mut *rng));
    let teacher_rois: Vec<BBox> = assignment.rois.iter().map(|r| apply_affine(&m_inv, r)).collect();
    let teacher_bg: Vec<f64> = if teacher_rois.is_empty() {
        Vec::new()
    } else {
        tpass
            .roi_forward(teacher, &teacher_rois)
            .0
            .logits
            .iter()
            .map(|z| softmax(z)[bg])
            .collect()
    };
    let targets = soft_targets(&assignment, &pseudo, &teacher_bg, bg, &config.semisup, cfg.roi_delta_stds);

    let teacher_pairs = if pairs.is_empty() {
        RoIPrediction::default()
    } else {
        let p_t: Vec<BBox> = pairs.iter().map(|p| p.p_t).collect();
        tpass.roi_forward(teacher, &p_t).0
    };
    let pair_weights = foreground_weights(&teacher_pairs.logits);
    Ok((
        UnlabeledPlan {
            strong: strong.image,
            pseudo,
            rpn_samples,
            rois: assignment.rois,
            targets,
            pairs,
            teacher_pairs,
            pair_weights,
        },
        spass,
    ))
}

/// Gradient multipliers of the unlabeled loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnlabeledScales {
    /// `L_cls_soft + L_reg_soft`
    pub soft: f64,
    pub ent: f64,
    pub iou: f64,
}

/// Losses of a fixed plan at `student`, whose strong-view pass is `spass`.
/// With `grads`, scaled gradients are accumulated into it; entropy
/// regression is skipped when both of its scales are zero.
pub fn unlabeled_plan_loss(
    student: &DetectorParams,
    spass: &ImagePass,
    plan: &UnlabeledPlan,
    config: &TrainingConfig,
    mask: GroupMask,
    scales: UnlabeledScales,
    grads: Option<&mut DetectorParams>,
) -> UnlabeledLosses {
    let soft_scale = scales.soft;
    let cfg = &student.config;
    let mut out = UnlabeledLosses {
        pseudo_labels: plan.pseudo.len(),
        pairs: plan.pairs.len(),
        ..Default::default()
    };
    let rpn_grad = plan.rpn_samples.as_ref().map(|samples| {
        let mut l = rpn_loss(&spass.rpn, &spass.anchors, samples);
        out.cls_soft += l.cls;
        out.reg_soft += l.reg;
        l.grad.scale(soft_scale);
        l.grad
    });

    let n_soft = plan.rois.len();
    let n_pairs = plan.pairs.len();
    let mut rois = plan.rois.clone();
    rois.extend(plan.pairs.iter().map(|p| p.p_s));
    if rois.is_empty() {
        if let (Some(g), Some(grads)) = (&rpn_grad, grads) {
            spass.backward(student, Some(g), &[], mask, grads);
        }
        return out;
    }
    let (pred, cache) = spass.roi_forward(student, &rois);
    let soft = roi_loss(&slice_prediction(&pred, 0..n_soft), &plan.targets);
    out.cls_soft += soft.cls;
    out.reg_soft += soft.reg;
    let mut dlogits: Vec<Vec<f64>> = soft
        .dlogits
        .iter()
        .map(|z| z.iter().map(|g| g * soft_scale).collect())
        .collect();
    let mut ddeltas: Vec<[f64; 4]> = soft.ddeltas.iter().map(|d| d.map(|g| g * soft_scale)).collect();

    if n_pairs > 0 {
        let t = &plan.teacher_pairs;
        let spairs = slice_prediction(&pred, n_soft..n_soft + n_pairs);
        let (l_ent, dz) = entropy_similarity_loss(&spairs.logits, &t.logits, &plan.pair_weights, config.entreg.similarity);
        let (l_iou, dbox) = iou_consistency_loss(&plan.pairs, &spairs.boxes, &t.boxes, &plan.pair_weights, config.entreg.overlap);
        out.ent = l_ent;
        out.iou = l_iou;
        if scales.ent != 0.0 || scales.iou != 0.0 {
            for i in 0..n_pairs {
                dlogits.push(dz[i].iter().map(|g| g * scales.ent).collect());
                let dd = decode_backward(&plan.pairs[i].p_s, spairs.deltas[i], cfg.roi_delta_stds, dbox[i]);
                ddeltas.push(dd.map(|g| g * scales.iou));
            }
        }
    }
    if let Some(grads) = grads {
        dlogits.resize(rois.len(), vec![0.0; student.num_classes]);
        ddeltas.resize(rois.len(), [0.0; 4]);
        let roi = RoiGrad {
            cache: &cache,
            dlogits: &dlogits,
            ddeltas: &ddeltas,
        };
        spass.backward(student, rpn_grad.as_ref(), &[roi], mask, grads);
    }
    out
}

/// Pseudo-label soft loss and entropy regression on one unlabeled image.
/// Soft-loss gradients are scaled by `soft_scale`, entropy regression
/// gradients by `ent_scale` (skipped entirely when it is zero). The teacher
/// only runs forward.
#[allow(clippy::too_many_arguments)]
pub fn unlabeled_image_loss(
    student: &DetectorParams,
    teacher: &DetectorParams,
    image: &Image,
    config: &TrainingConfig,
    mask: GroupMask,
    soft_scale: f64,
    ent_scale: f64,
    aug_rng: &mut ChaCha8Rng,
    rng: &mut ChaCha8Rng,
    grads: &mut DetectorParams,
) -> Result<UnlabeledLosses> {
    let (plan, spass) = plan_unlabeled(student, teacher, image, config, mask, aug_rng, rng)?;
    let scales = UnlabeledScales {
        soft: soft_scale,
        ent: ent_scale,
        iou: ent_scale,
    };
    Ok(unlabeled_plan_loss(student, &spass, &plan, config, mask, scales, Some(grads)))
}

/// Student, EMA teacher and optimizer state of one training stage.
pub struct Trainer<'a> {
    config: TrainingConfig,
    data: &'a StageData,
    pub student: DetectorParams,
    pub ema: EmaState,
    optimizer: Sgd,
    mask: GroupMask,
    step: usize,
    labeled_order: Cycler,
    unlabeled_order: Cycler,
    labeled_aug: ChaCha8Rng,
    labeled_sampling: ChaCha8Rng,
    unlabeled_aug: ChaCha8Rng,
    unlabeled_sampling: ChaCha8Rng,
    pub log: Vec<StepLog>,
    /// Per-group gradient norms of the last step, as the optimizer saw them.
    pub last_grad_norms: BTreeMap<ParamGroup, f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(student: DetectorParams, teacher: DetectorParams, data: &'a StageData, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        student.check_aligned(&teacher)?;
        if data.labeled.is_empty() {
            return Err(Error::Config("stage has no labeled images".into()));
        }
        if config.effective_unlabeled() > 0 && data.unlabeled.is_empty() {
            return Err(Error::Config(format!(
                "method {} draws {} unlabeled images per step but the pool is empty",
                config.method.name(),
                config.batch_unlabeled
            )));
        }
        let nc = student.num_classes - 1;
        if let Some(l) = data.labeled.iter().flat_map(|s| &s.labels).find(|&&l| l >= nc) {
            return Err(Error::Config(format!("label {l} outside a head with {nc} classes")));
        }
        let mask = apply_freeze_policy(&config.freeze)?;
        let seed = config.seed;
        Ok(Trainer {
            optimizer: Sgd::new(&student, config.schedule.momentum, config.schedule.weight_decay),
            ema: EmaState::new(teacher, config.semisup.ema_momentum),
            student,
            mask,
            step: 0,
            labeled_order: Cycler::new(data.labeled.len(), stream(seed, STREAM_LABELED_ORDER)),
            unlabeled_order: Cycler::new(data.unlabeled.len(), stream(seed, STREAM_UNLABELED_ORDER)),
            labeled_aug: stream(seed, STREAM_LABELED_AUG),
            labeled_sampling: stream(seed, STREAM_LABELED_SAMPLING),
            unlabeled_aug: stream(seed, STREAM_UNLABELED_AUG),
            unlabeled_sampling: stream(seed, STREAM_UNLABELED_SAMPLING),
            log: Vec::new(),
            last_grad_norms: BTreeMap::new(),
            data,
            config,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn mask(&self) -> GroupMask {
        self.mask
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn teacher(&self) -> &DetectorParams {
        &self.ema.teacher
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let cfg = &self.config;
        let weights = cfg.loss_weights();
        let bl = cfg.batch_labeled;
        let bu = if self.step < cfg.burn_in { 0 } else { cfg.effective_unlabeled() };
        let mut grads = self.student.zeros_like();

        let mut l_sup = 0.0;
        for _ in 0..bl {
            let sample = &self.data.labeled[self.labeled_order.next()];
            let view = augment(&sample.image, &cfg.augment.labeled, &mut self.labeled_aug)?;
            let (w, h) = (view.image.width as f64, view.image.height as f64);
            let (boxes, labels) = map_boxes(&view.transform, &sample.boxes, &sample.labels, w, h);
            l_sup += supervised_image_loss(
                &self.student,
                &view.image,
                &boxes,
                &labels,
                self.mask,
                1.0 / bl as f64,
                &mut self.labeled_sampling,
                &mut grads,
            ) / bl as f64;
        }

        let mut un = UnlabeledLosses::default();
        for _ in 0..bu {
            let image = &self.data.unlabeled[self.unlabeled_order.next()];
            let l = unlabeled_image_loss(
                &self.student,
                &self.ema.teacher,
                image,
                cfg,
                self.mask,
                weights.alpha / bu as f64,
                weights.beta / bu as f64,
                &mut self.unlabeled_aug,
                &mut self.unlabeled_sampling,
                &mut grads,
            )?;
            un.cls_soft += l.cls_soft / bu as f64;
            un.reg_soft += l.reg_soft / bu as f64;
            un.ent += l.ent / bu as f64;
            un.iou += l.iou / bu as f64;
        }

        let total = total_loss(l_sup, un.cls_soft + un.reg_soft, un.ent, un.iou, weights).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite {
                step: Some(self.step),
                detail,
            },
            e => e,
        })?;
        masked_gradients(&mut grads, self.mask);
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                step: Some(self.step),
                detail: format!(
                    "gradient (L_sup {l_sup}, L_cls_soft {}, L_reg_soft {}, L_ent {}, L_iou {})",
                    un.cls_soft, un.reg_soft, un.ent, un.iou
                ),
            });
        }
        self.last_grad_norms = group_norms(&grads);
        clip_global_norm(&mut grads, cfg.schedule.grad_clip);
        let lr = cfg.schedule.lr_at(self.step);
        self.optimizer.step(&mut self.student, &grads, self.mask, lr);
        self.ema.update(&self.student, self.mask)?;

        let entry = StepLog {
            step: self.step,
            l_sup,
            l_cls_soft: un.cls_soft,
            l_reg_soft: un.reg_soft,
            l_ent: un.ent,
            l_iou: un.iou,
            total,
            lr,
        };
        self.step += 1;
        self.log.push(entry);
        Ok(entry)
    }

    /// Runs the remaining steps of the schedule.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.config.schedule.iterations {
            self.step()?;
        }
        Ok(())
    }
}
