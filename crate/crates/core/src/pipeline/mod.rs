//! Training orchestration: semi-supervised base pre-training, few-shot
//! fine-tuning stages, freeze policies and the per-step loss log.

pub mod log;
pub mod optim;
pub mod protocol;
pub mod stages;
pub mod trainer;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationRecipe, Branch};
use crate::detector::{GroupMask, ParamGroup};
use crate::entreg::EntRegConfig;
use crate::error::{Error, Result};
use crate::semisup::SemiSupConfig;

pub use log::StepLog;
pub use stages::{finetune_balanced, init_few_shot_from_teacher, pretrain_base, train_novel_head, NovelInit, StageOutput};
pub use trainer::{LabeledImage, StageData, Trainer, UnlabeledScales};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    BasePretrain,
    NovelHead,
    BalancedFinetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::BasePretrain => "base_pretrain",
            Stage::NovelHead => "novel_head",
            Stage::BalancedFinetune => "balanced_finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Labeled images only.
    Supervised,
    /// Adds pseudo-labeled unlabeled images.
    SoftTeacher,
    /// Soft Teacher plus entropy regression on proposal pairs.
    SoftErTeacher,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Supervised, Method::SoftTeacher, Method::SoftErTeacher];

    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::SoftTeacher => "soft_teacher",
            Method::SoftErTeacher => "softer_teacher",
        }
    }
}

/// Parameter groups the optimizer may update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezePolicy {
    pub trainable: BTreeSet<ParamGroup>,
}

impl FreezePolicy {
    pub fn all() -> Self {
        FreezePolicy {
            trainable: ParamGroup::ALL.into_iter().collect(),
        }
    }

    pub fn only(groups: &[ParamGroup]) -> Self {
        FreezePolicy {
            trainable: groups.iter().copied().collect(),
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::BasePretrain => Self::all(),
            Stage::NovelHead => Self::only(&[ParamGroup::RoiClassifier, ParamGroup::RoiRegressor]),
            Stage::BalancedFinetune => Self::only(&[ParamGroup::RoiClassifier]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trainable.is_empty() {
            return Err(Error::Config("freeze policy leaves no trainable parameter group".into()));
        }
        Ok(())
    }
}

/// Optimizer selection: the groups the optimizer sees.
pub fn apply_freeze_policy(policy: &FreezePolicy) -> Result<GroupMask> {
    policy.validate()?;
    let groups: Vec<ParamGroup> = policy.trainable.iter().copied().collect();
    Ok(GroupMask::only(&groups))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Steps at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub iterations: usize,
    pub warmup_iters: usize,
    pub warmup_ratio: f64,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![120_000, 160_000],
            gamma: 0.1,
            iterations: 180_000,
            warmup_iters: 500,
            warmup_ratio: 0.001,
            grad_clip: 0.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones {:?} are not strictly increasing", self.milestones)));
        }
        if let Some(&last) = self.milestones.last() {
            if self.iterations > 0 && last >= self.iterations {
                return Err(Error::Config(format!(
                    "milestone {last} is not below the iteration count {}",
                    self.iterations
                )));
            }
        }
        Ok(())
    }

    /// Learning rate used at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| step >= m).count();
        let mut lr = self.lr * self.gamma.powi(decays as i32);
        if step < self.warmup_iters {
            let t = step as f64 / self.warmup_iters as f64;
            lr *= self.warmup_ratio + (1.0 - self.warmup_ratio) * t;
        }
        lr
    }

    /// Scales iteration counts, milestones and warm-up to `iterations`.
    pub fn rescaled(&self, iterations: usize) -> Schedule {
        let f = iterations as f64 / self.iterations.max(1) as f64;
        Schedule {
            milestones: self.milestones.iter().map(|m| (*m as f64 * f).round() as usize).collect(),
            iterations,
            warmup_iters: ((self.warmup_iters as f64 * f).round() as usize).min(iterations),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSettings {
    pub labeled: AugmentationRecipe,
    pub strong: AugmentationRecipe,
    pub weak: AugmentationRecipe,
}

impl AugmentSettings {
    pub fn desk(canvas: u32) -> Self {
        AugmentSettings {
            labeled: AugmentationRecipe::desk(Branch::Labeled, canvas),
            strong: AugmentationRecipe::desk(Branch::Strong, canvas),
            weak: AugmentationRecipe::desk(Branch::Weak, canvas),
        }
    }

    pub fn coco() -> Self {
        AugmentSettings {
            labeled: AugmentationRecipe::coco(Branch::Labeled),
            strong: AugmentationRecipe::coco(Branch::Strong),
            weak: AugmentationRecipe::coco(Branch::Weak),
        }
    }

    pub fn set_fill(&mut self, fill: [f32; 3]) {
        for r in [&mut self.labeled, &mut self.strong, &mut self.weak] {
            r.fill_color = Some(fill);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.labeled.validate()?;
        self.strong.validate()?;
        self.weak.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage: Stage,
    pub method: Method,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    /// Steps trained on labeled images only before the unlabeled branch starts.
    #[serde(default)]
    pub burn_in: usize,
    pub schedule: Schedule,
    pub freeze: FreezePolicy,
    pub seed: u64,
    pub augment: AugmentSettings,
    pub semisup: SemiSupConfig,
    pub entreg: EntRegConfig,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_labeled == 0 {
            return Err(Error::Config("batch_labeled must be at least 1".into()));
        }
        self.schedule.validate()?;
        self.freeze.validate()?;
        self.augment.validate()?;
        self.semisup.validate()
    }

    /// Unlabeled images drawn per step once the burn-in is over.
    pub fn effective_unlabeled(&self) -> usize {
        match self.method {
            Method::Supervised => 0,
            _ => self.batch_unlabeled,
        }
    }

    pub fn loss_weights(&self) -> crate::entreg::LossWeights {
        let mut w = crate::entreg::LossWeights::from_batch(
            self.batch_labeled,
            self.effective_unlabeled(),
            self.entreg.beta_multiplier,
        );
        if self.method != Method::SoftErTeacher {
            w.beta = 0.0;
        }
        w
    }
}
