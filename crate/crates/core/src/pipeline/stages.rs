use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::log::StepLog;
use super::trainer::{LabeledImage, StageData, Trainer};
use super::{apply_freeze_policy, TrainingConfig};
use crate::data::{Dataset, FewShotSplit};
use crate::detector::{Checkpoint, DetectorParams, GroupMask, ParamGroup};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    pub log: Vec<StepLog>,
}

impl StageOutput {
    pub fn checkpoint(&self, stage: &str, class_ids: Vec<u64>, config_hash: String) -> Checkpoint {
        Checkpoint {
            stage: stage.to_string(),
            class_ids,
            config_hash,
            student: self.student.clone(),
            teacher: Some(self.teacher.clone()),
        }
    }
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Labeled images restricted to the classes of `class_order`; a box's label
/// is its class's position there. Images keep their place even when none of
/// their objects survive.
pub fn labeled_images(dataset: &Dataset, image_ids: &[u64], class_order: &[u64]) -> Vec<LabeledImage> {
    let head: BTreeMap<u64, usize> = class_order.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let by_image = dataset.index.annotations_by_image();
    image_ids
        .iter()
        .map(|id| {
            let mut s = LabeledImage {
                image: dataset.image(*id).clone(),
                boxes: Vec::new(),
                labels: Vec::new(),
            };
            for a in by_image.get(id).into_iter().flatten() {
                if let Some(&l) = head.get(&a.category_id) {
                    s.boxes.push(a.bbox);
                    s.labels.push(l);
                }
            }
            s
        })
        .collect()
}

/// Images holding the shots of `classes`, annotated with those shots only.
pub fn shot_images(dataset: &Dataset, split: &FewShotSplit, classes: &BTreeSet<u64>, class_order: &[u64]) -> Result<Vec<LabeledImage>> {
    let head: BTreeMap<u64, usize> = class_order.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let mut per_image: BTreeMap<u64, LabeledImage> = BTreeMap::new();
    for (class, shots) in &split.shot_instances {
        if !classes.contains(class) {
            continue;
        }
        let &label = head
            .get(class)
            .ok_or_else(|| Error::Split(format!("class {class} has no head index")))?;
        for &(image_id, ann_id) in shots {
            let ann = dataset
                .index
                .annotation(ann_id)
                .ok_or_else(|| Error::Split(format!("shot annotation {ann_id} not in the dataset")))?;
            let entry = per_image.entry(image_id).or_insert_with(|| LabeledImage {
                image: dataset.image(image_id).clone(),
                boxes: Vec::new(),
                labels: Vec::new(),
            });
            entry.boxes.push(ann.bbox);
            entry.labels.push(label);
        }
    }
    Ok(per_image.into_values().collect())
}

pub fn unlabeled_images(dataset: &Dataset, image_ids: &[u64]) -> Vec<Image> {
    image_ids.iter().map(|id| dataset.image(*id).clone()).collect()
}

/// Runs one stage from the given student/teacher pair.
pub fn train_stage(student: DetectorParams, teacher: DetectorParams, data: &StageData, config: &TrainingConfig) -> Result<StageOutput> {
    let mut trainer = Trainer::new(student, teacher, data, config.clone())?;
    trainer.run()?;
    Ok(StageOutput {
        student: trainer.student,
        teacher: trainer.ema.teacher,
        log: trainer.log,
    })
}

/// Base-class training; the teacher starts as a copy of `init`.
pub fn pretrain_base(init: DetectorParams, data: &StageData, config: &TrainingConfig) -> Result<StageOutput> {
    train_stage(init.clone(), init, data, config)
}

/// How fresh novel rows of the classifier are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NovelInit {
    pub std: f64,
    pub seed: u64,
}

impl Default for NovelInit {
    fn default() -> Self {
        NovelInit { std: 0.01, seed: 0 }
    }
}

/// Few-shot detector from the base checkpoint's teacher branch, with the
/// classifier grown to `class_order` (base classes first, in checkpoint order).
pub fn init_few_shot_from_teacher(checkpoint: &Checkpoint, class_order: &[u64], init: NovelInit) -> Result<DetectorParams> {
    let teacher = checkpoint.teacher()?;
    if class_order.len() < checkpoint.class_ids.len() || class_order[..checkpoint.class_ids.len()] != checkpoint.class_ids[..] {
        return Err(Error::Checkpoint(format!(
            "class order {class_order:?} does not extend the checkpoint classes {:?}",
            checkpoint.class_ids
        )));
    }
    teacher.extend_classes(class_order.len() + 1, init.std, &mut ChaCha8Rng::seed_from_u64(init.seed))
}

fn frozen_groups(mask: GroupMask) -> Vec<ParamGroup> {
    ParamGroup::ALL.into_iter().filter(|g| !mask.contains(*g)).collect()
}

/// Errors when a group outside `mask` differs between `before` and `after`.
pub fn verify_frozen(before: &DetectorParams, after: &DetectorParams, mask: GroupMask) -> Result<()> {
    for g in frozen_groups(mask) {
        if !before.group_bitwise_eq(after, g) {
            return Err(Error::Config(format!("frozen group {g} changed during training")));
        }
    }
    Ok(())
}

fn head_only(config: &TrainingConfig) -> Result<GroupMask> {
    let mask = apply_freeze_policy(&config.freeze)?;
    if mask.contains(ParamGroup::Backbone) || mask.contains(ParamGroup::Neck) || mask.contains(ParamGroup::Rpn) {
        return Err(Error::Config(format!(
            "fine-tuning stages keep backbone, neck and rpn frozen; got trainable {:?}",
            mask.groups()
        )));
    }
    Ok(mask)
}

fn run_frozen(params: DetectorParams, data: &StageData, config: &TrainingConfig, mask: GroupMask) -> Result<StageOutput> {
    let before = params.clone();
    let out = train_stage(params.clone(), params, data, config)?;
    verify_frozen(&before, &out.student, mask)?;
    verify_frozen(&before, &out.teacher, mask)?;
    Ok(out)
}

/// Trains the RoI head on the novel shots (plus the unlabeled pool) with
/// backbone, neck and RPN frozen.
pub fn train_novel_head(params: DetectorParams, data: &StageData, config: &TrainingConfig) -> Result<StageOutput> {
    let mask = head_only(config)?;
    run_frozen(params, data, config, mask)
}

/// Fine-tunes on a balanced k-shot set; by default only the box classifier
/// moves.
pub fn finetune_balanced(params: DetectorParams, data: &StageData, split: &FewShotSplit, config: &TrainingConfig) -> Result<StageOutput> {
    if !split.is_balanced() {
        return Err(Error::Split(format!("fine-tuning set is not balanced at k = {}", split.k)));
    }
    let mask = head_only(config)?;
    run_frozen(params, data, config, mask)
}
