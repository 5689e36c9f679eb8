//! The two-stage benchmark protocol: base pre-training at a small label
//! fraction, then few-shot fine-tuning on base + novel classes. `desk()` runs
//! on synthetic scenes in minutes; `coco()` records the full-scale settings.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stages::{
    config_hash, finetune_balanced, init_few_shot_from_teacher, labeled_images, pretrain_base, shot_images, train_novel_head, unlabeled_images, NovelInit,
    StageOutput,
};
use super::{AugmentSettings, FreezePolicy, Method, Schedule, Stage, StageData, TrainingConfig};
use crate::data::{build_few_shot_split, generate_synthetic_dataset, sample_labeled_fraction, Dataset, FewShotSplit, SyntheticSceneSpec};
use crate::detector::{Checkpoint, DetectorConfig, DetectorParams, ParamGroup};
use crate::entreg::EntRegConfig;
use crate::error::Result;
use crate::eval::{run_inference, EvalReport};
use crate::semisup::SemiSupConfig;

/// The 80 COCO category ids.
pub const COCO_IDS: [u64; 80] = [
    1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 27, 28, 31, 32, 33, 34, 35, 36, 37, 38, 39, 40, 41, 42, 43, 44,
    46, 47, 48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 60, 61, 62, 63, 64, 65, 67, 70, 72, 73, 74, 75, 76, 77, 78, 79, 80, 81, 82, 84, 85, 86, 87, 88,
    89, 90,
];

/// COCO ids of the 20 categories shared with PASCAL VOC, the usual novel set.
pub const COCO_NOVEL: [u64; 20] = [1, 2, 3, 4, 5, 6, 7, 9, 16, 17, 18, 19, 20, 21, 44, 62, 63, 64, 67, 72];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub synth: SyntheticSceneSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub base_classes: Vec<u64>,
    pub novel_classes: Vec<u64>,
    pub labeled_percent: f64,
    pub k_shot: usize,
    pub detector: DetectorConfig,
    pub pretrain: TrainingConfig,
    pub novel_head: TrainingConfig,
    pub finetune: TrainingConfig,
    pub novel_init: NovelInit,
    /// Entropy regression in the novel-head step of SoftER runs.
    pub novel_head_entreg: bool,
    /// Entropy regression in the classifier-only step of SoftER runs.
    pub finetune_entreg: bool,
    /// Add the base shots to the novel-head step.
    pub novel_head_includes_base: bool,
}

fn desk_training(stage: Stage, iterations: usize, batch_unlabeled: usize, burn_in: usize, lr: f64, canvas: u32) -> TrainingConfig {
    TrainingConfig {
        stage,
        method: Method::SoftErTeacher,
        batch_labeled: 2,
        batch_unlabeled,
        burn_in,
        schedule: Schedule {
            lr,
            iterations,
            milestones: vec![iterations * 2 / 3, iterations * 8 / 9],
            warmup_iters: (iterations / 20).min(100),
            grad_clip: 10.0,
            ..Schedule::default()
        },
        freeze: FreezePolicy::for_stage(stage),
        seed: 0,
        augment: AugmentSettings::desk(canvas),
        semisup: SemiSupConfig {
            ema_momentum: 0.99,
            ..SemiSupConfig::default()
        },
        entreg: EntRegConfig {
            top_n: 64,
            ..EntRegConfig::default()
        },
    }
}

impl Protocol {
    /// Minutes-scale settings for a single core.
    pub fn desk() -> Self {
        let synth = SyntheticSceneSpec::default();
        let canvas = synth.canvas_width.min(synth.canvas_height) as u32;
        Protocol {
            n_train: 400,
            n_test: 100,
            base_classes: (1..=6).collect(),
            novel_classes: vec![7, 8],
            labeled_percent: 10.0,
            k_shot: 10,
            detector: DetectorConfig::default(),
            pretrain: desk_training(Stage::BasePretrain, 3000, 2, 1500, 0.02, canvas),
            novel_head: desk_training(Stage::NovelHead, 300, 2, 0, 0.02, canvas),
            finetune: TrainingConfig {
                method: Method::Supervised,
                ..desk_training(Stage::BalancedFinetune, 300, 0, 0, 0.01, canvas)
            },
            novel_init: NovelInit::default(),
            novel_head_entreg: true,
            finetune_entreg: false,
            novel_head_includes_base: false,
            synth,
        }
    }

    /// Full-scale settings: 8 labeled + 32 unlabeled images per step, 180k
    /// iterations, 60 base / 20 novel COCO categories.
    pub fn coco() -> Self {
        let coco_training = |stage: Stage, method: Method, iterations: usize, milestones: Vec<usize>, lr: f64, bu: usize| TrainingConfig {
            stage,
            method,
            batch_labeled: 8,
            batch_unlabeled: bu,
            burn_in: 0,
            schedule: Schedule {
                lr,
                iterations,
                milestones,
                ..Schedule::default()
            },
            freeze: FreezePolicy::for_stage(stage),
            seed: 0,
            augment: AugmentSettings::coco(),
            semisup: SemiSupConfig::default(),
            entreg: EntRegConfig::default(),
        };
        let novel_classes = COCO_NOVEL.to_vec();
        Protocol {
            synth: SyntheticSceneSpec::default(),
            n_train: 0,
            n_test: 0,
            base_classes: COCO_IDS.iter().copied().filter(|c| !novel_classes.contains(c)).collect(),
            novel_classes,
            labeled_percent: 10.0,
            k_shot: 10,
            detector: DetectorConfig::default(),
            pretrain: coco_training(Stage::BasePretrain, Method::SoftErTeacher, 180_000, vec![120_000, 160_000], 0.01, 32),
            novel_head: coco_training(Stage::NovelHead, Method::SoftErTeacher, 10_000, vec![8_000], 0.01, 32),
            finetune: coco_training(Stage::BalancedFinetune, Method::Supervised, 20_000, vec![16_000], 0.001, 0),
            novel_init: NovelInit::default(),
            novel_head_entreg: true,
            finetune_entreg: false,
            novel_head_includes_base: false,
        }
    }

    pub fn class_order(&self) -> Vec<u64> {
        self.base_classes.iter().chain(&self.novel_classes).copied().collect()
    }
}

/// Method actually run in a stage: a supervised stage config stays
/// supervised, and SoftER drops to Soft Teacher where entropy regression is off.
pub fn stage_method(method: Method, stage_default: Method, entreg: bool) -> Method {
    if method == Method::Supervised || stage_default == Method::Supervised {
        Method::Supervised
    } else if method == Method::SoftErTeacher && !entreg {
        Method::SoftTeacher
    } else {
        method
    }
}

/// Datasets and splits shared by every method of one seed.
#[derive(Debug, Clone)]
pub struct ProtocolData {
    pub train: Dataset,
    pub test: Dataset,
    pub labeled_ids: Vec<u64>,
    pub unlabeled_ids: Vec<u64>,
    pub split: FewShotSplit,
}

impl ProtocolData {
    /// Synthetic train/test sets of one seed.
    pub fn synthesize(protocol: &Protocol, seed: u64) -> Result<(Dataset, Dataset)> {
        let make = |s: u64, n: usize| generate_synthetic_dataset(&SyntheticSceneSpec { seed: s, ..protocol.synth.clone() }, n);
        Ok((make(seed.wrapping_mul(2), protocol.n_train)?, make(seed.wrapping_mul(2) + 1, protocol.n_test)?))
    }

    /// Label-fraction and few-shot splits of `train`.
    pub fn from_datasets(protocol: &Protocol, train: Dataset, test: Dataset, seed: u64) -> Result<Self> {
        let (labeled_ids, unlabeled_ids) = sample_labeled_fraction(&train.index, protocol.labeled_percent, seed)?;
        let base: BTreeSet<u64> = protocol.base_classes.iter().copied().collect();
        let novel: BTreeSet<u64> = protocol.novel_classes.iter().copied().collect();
        let split = build_few_shot_split(&train.index, &base, &novel, protocol.k_shot, seed)?;
        Ok(ProtocolData {
            train,
            test,
            labeled_ids,
            unlabeled_ids,
            split,
        })
    }

    pub fn build(protocol: &Protocol, seed: u64) -> Result<Self> {
        let (train, test) = Self::synthesize(protocol, seed)?;
        Self::from_datasets(protocol, train, test, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub seed: u64,
    pub method: Method,
    /// Base detector (teacher) on the test set.
    pub pretrain: EvalReport,
    /// Final few-shot detector (teacher) on the test set.
    pub finetuned: EvalReport,
}

/// Stage outputs of one method, kept for inspection.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub outcome: MethodOutcome,
    pub pretrain: StageOutput,
    pub novel_head: StageOutput,
    pub finetune: StageOutput,
}

/// A stage's config as run for `method` with `seed`.
pub fn stage_config(config: &TrainingConfig, method: Method, entreg: bool, seed: u64) -> TrainingConfig {
    TrainingConfig {
        method: stage_method(method, config.method, entreg),
        seed,
        ..config.clone()
    }
}

/// Base pre-training of `method`; the checkpoint carries both branches.
pub fn run_pretrain(protocol: &Protocol, data: &ProtocolData, seed: u64, method: Method) -> Result<(StageOutput, Checkpoint)> {
    let base_order = protocol.base_classes.clone();
    let init = DetectorParams::init(&protocol.detector, base_order.len() + 1, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let pre_data = StageData {
        labeled: labeled_images(&data.train, &data.labeled_ids, &base_order),
        unlabeled: unlabeled_images(&data.train, &data.unlabeled_ids),
    };
    let pre_cfg = stage_config(&protocol.pretrain, method, true, seed);
    let pretrain = pretrain_base(init, &pre_data, &pre_cfg)?;
    let ck = pretrain.checkpoint(Stage::BasePretrain.name(), base_order, config_hash(&pre_cfg)?);
    Ok((pretrain, ck))
}

/// Novel-head training followed by the balanced fine-tune, starting from the
/// base checkpoint's teacher.
pub fn run_few_shot(protocol: &Protocol, data: &ProtocolData, seed: u64, method: Method, base: &Checkpoint) -> Result<[(StageOutput, Checkpoint); 2]> {
    let order = protocol.class_order();
    let base_set: BTreeSet<u64> = protocol.base_classes.iter().copied().collect();
    let novel: BTreeSet<u64> = protocol.novel_classes.iter().copied().collect();
    let fs = init_few_shot_from_teacher(
        base,
        &order,
        NovelInit {
            seed: seed ^ 0x5eed,
            ..protocol.novel_init
        },
    )?;
    let head_classes: BTreeSet<u64> = if protocol.novel_head_includes_base {
        base_set.union(&novel).copied().collect()
    } else {
        novel.clone()
    };
    let all_ids: Vec<u64> = data.train.index.image_ids();
    let nh_data = StageData {
        labeled: shot_images(&data.train, &data.split, &head_classes, &order)?,
        unlabeled: unlabeled_images(&data.train, &all_ids),
    };
    let nh_cfg = stage_config(&protocol.novel_head, method, protocol.novel_head_entreg, seed.wrapping_add(1));
    let novel_head = train_novel_head(fs, &nh_data, &nh_cfg)?;
    let nh_ck = novel_head.checkpoint(Stage::NovelHead.name(), order.clone(), config_hash(&nh_cfg)?);

    let all_classes: BTreeSet<u64> = base_set.union(&novel).copied().collect();
    let ft_data = StageData {
        labeled: shot_images(&data.train, &data.split, &all_classes, &order)?,
        unlabeled: nh_data.unlabeled,
    };
    let ft_cfg = stage_config(&protocol.finetune, method, protocol.finetune_entreg, seed.wrapping_add(2));
    let finetune = finetune_balanced(novel_head.teacher.clone(), &ft_data, &data.split, &ft_cfg)?;
    let ft_ck = finetune.checkpoint(Stage::BalancedFinetune.name(), order, config_hash(&ft_cfg)?);
    Ok([(novel_head, nh_ck), (finetune, ft_ck)])
}

pub fn run_method(protocol: &Protocol, data: &ProtocolData, seed: u64, method: Method) -> Result<MethodRun> {
    let base: BTreeSet<u64> = protocol.base_classes.iter().copied().collect();
    let novel: BTreeSet<u64> = protocol.novel_classes.iter().copied().collect();
    let (pretrain, base_ck) = run_pretrain(protocol, data, seed, method)?;
    let pre_report = EvalReport::from_inputs(&run_inference(&pretrain.teacher, &protocol.base_classes, &data.test)?, &base, &novel, None);
    let [(novel_head, _), (finetune, _)] = run_few_shot(protocol, data, seed, method, &base_ck)?;
    let final_report = EvalReport::from_inputs(&run_inference(&finetune.teacher, &protocol.class_order(), &data.test)?, &base, &novel, pre_report.base_ap);
    Ok(MethodRun {
        outcome: MethodOutcome {
            seed,
            method,
            pretrain: pre_report,
            finetuned: final_report,
        },
        pretrain,
        novel_head,
        finetune,
    })
}

pub fn run_seed(protocol: &Protocol, seed: u64, methods: &[Method]) -> Result<Vec<MethodOutcome>> {
    let data = ProtocolData::build(protocol, seed)?;
    methods
        .iter()
        .map(|&m| run_method(protocol, &data, seed, m).map(|r| r.outcome))
        .collect()
}

/// Freeze policy of the classifier+regressor ablation of the last step.
pub fn finetune_both_heads() -> FreezePolicy {
    FreezePolicy::only(&[ParamGroup::RoiClassifier, ParamGroup::RoiRegressor])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_mapping() {
        use Method::*;
        assert_eq!(stage_method(SoftErTeacher, SoftErTeacher, true), SoftErTeacher);
        assert_eq!(stage_method(SoftErTeacher, SoftErTeacher, false), SoftTeacher);
        assert_eq!(stage_method(SoftTeacher, Supervised, true), Supervised);
        assert_eq!(stage_method(Supervised, SoftErTeacher, true), Supervised);
    }

    #[test]
    fn desk_protocol_is_valid() {
        let p = Protocol::desk();
        p.pretrain.validate().unwrap();
        p.novel_head.validate().unwrap();
        p.finetune.validate().unwrap();
        assert_eq!(p.class_order(), (1..=8).collect::<Vec<u64>>());
    }

    #[test]
    fn coco_protocol_is_valid() {
        let p = Protocol::coco();
        for c in [&p.pretrain, &p.novel_head, &p.finetune] {
            c.validate().unwrap();
        }
        assert_eq!((p.base_classes.len(), p.novel_classes.len()), (60, 20));
        assert_eq!((p.pretrain.batch_labeled, p.pretrain.batch_unlabeled), (8, 32));
        assert_eq!(p.pretrain.schedule.milestones, vec![120_000, 160_000]);
    }
}
