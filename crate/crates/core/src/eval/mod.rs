//! Detection and proposal metrics, the generalized base/novel report, and
//! plot emission.

mod metrics;
mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use metrics::{
    average_precision, class_mean, coco_thresholds, detection_recall, forgetting_pct, interpolated_ap, proposal_recall_at, spearman, Detection, GroundTruth,
    Proposal, MAX_DETS,
};
pub use plot::{emit_plots, Plot, PlotKind, Series};

use crate::data::{Dataset, FewShotSplit};
use crate::detector::{Checkpoint, DetectorParams, ImagePass};
use crate::error::{Error, Result};

pub const PROPOSAL_BUDGETS: [usize; 3] = [100, 300, 1000];

/// Model outputs over a dataset, in dataset category ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalInputs {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
    pub proposals: Vec<Proposal>,
}

/// Runs `params` over every image. `class_ids[i]` is the category of head index `i`.
pub fn run_inference(params: &DetectorParams, class_ids: &[u64], dataset: &Dataset) -> Result<EvalInputs> {
    if class_ids.len() + 1 != params.num_classes {
        return Err(Error::Eval(format!(
            "{} class ids for a head with {} foreground classes",
            class_ids.len(),
            params.num_classes - 1
        )));
    }
    let max_budget = PROPOSAL_BUDGETS[PROPOSAL_BUDGETS.len() - 1];
    let mut out = EvalInputs::default();
    for rec in &dataset.index.images {
        let pass = ImagePass::forward(params, dataset.image(rec.id));
        for d in pass.detect(params) {
            out.detections.push(Detection {
                image_id: rec.id,
                bbox: d.bbox,
                score: d.score,
                category_id: class_ids[d.class_id],
            });
        }
        for p in pass.proposals(params, max_budget) {
            out.proposals.push(Proposal {
                image_id: rec.id,
                bbox: p.bbox,
                score: p.score,
            });
        }
    }
    out.ground_truth = dataset
        .index
        .annotations
        .iter()
        .map(|a| GroundTruth {
            image_id: a.image_id,
            bbox: a.bbox,
            category_id: a.category_id,
        })
        .collect();
    Ok(out)
}

/// AR@100/300/1000 of class-agnostic proposals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecall {
    pub ar_100: Option<f64>,
    pub ar_300: Option<f64>,
    pub ar_1000: Option<f64>,
}

impl ProposalRecall {
    pub fn compute(proposals: &[Proposal], gts: &[GroundTruth]) -> Self {
        ProposalRecall {
            ar_100: proposal_recall_at(proposals, gts, 100),
            ar_300: proposal_recall_at(proposals, gts, 300),
            ar_1000: proposal_recall_at(proposals, gts, 1000),
        }
    }
}

/// Generalized few-shot report. AP is AP50:95 unless suffixed; `*_ar` is the
/// per-class detection recall, distinct from the proposal recall blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<u64, f64>,
    pub per_class_ap50: BTreeMap<u64, f64>,
    pub per_class_ar: BTreeMap<u64, f64>,
    pub base_ap: Option<f64>,
    pub novel_ap: Option<f64>,
    pub overall_ap: Option<f64>,
    pub base_ap50: Option<f64>,
    pub novel_ap50: Option<f64>,
    pub overall_ap50: Option<f64>,
    pub base_ar: Option<f64>,
    pub novel_ar: Option<f64>,
    pub overall_ar: Option<f64>,
    pub proposal_recall: ProposalRecall,
    pub base_proposal_recall: ProposalRecall,
    pub novel_proposal_recall: ProposalRecall,
    pub base_ap_pretrain: Option<f64>,
    pub forgetting_pct: Option<f64>,
}

impl EvalReport {
    /// Metrics restricted to ground truth of `base` and `novel` classes.
    pub fn from_inputs(inputs: &EvalInputs, base: &BTreeSet<u64>, novel: &BTreeSet<u64>, base_ap_pretrain: Option<f64>) -> EvalReport {
        let all: BTreeSet<u64> = base.union(novel).copied().collect();
        let gts: Vec<GroundTruth> = inputs
            .ground_truth
            .iter()
            .filter(|g| all.contains(&g.category_id))
            .copied()
            .collect();
        let only = |set: &BTreeSet<u64>| -> Vec<GroundTruth> { gts.iter().filter(|g| set.contains(&g.category_id)).copied().collect() };
        let t = coco_thresholds();
        let per_class_ap = average_precision(&inputs.detections, &gts, &t);
        let per_class_ap50 = average_precision(&inputs.detections, &gts, &[0.5]);
        let per_class_ar = detection_recall(&inputs.detections, &gts, &t);
        let mean = |m: &BTreeMap<u64, f64>, s: &BTreeSet<u64>| class_mean(m, s.iter().copied());
        let base_ap = mean(&per_class_ap, base);
        EvalReport {
            base_ap,
            novel_ap: mean(&per_class_ap, novel),
            overall_ap: mean(&per_class_ap, &all),
            base_ap50: mean(&per_class_ap50, base),
            novel_ap50: mean(&per_class_ap50, novel),
            overall_ap50: mean(&per_class_ap50, &all),
            base_ar: mean(&per_class_ar, base),
            novel_ar: mean(&per_class_ar, novel),
            overall_ar: mean(&per_class_ar, &all),
            proposal_recall: ProposalRecall::compute(&inputs.proposals, &gts),
            base_proposal_recall: ProposalRecall::compute(&inputs.proposals, &only(base)),
            novel_proposal_recall: ProposalRecall::compute(&inputs.proposals, &only(novel)),
            base_ap_pretrain,
            forgetting_pct: match (base_ap_pretrain, base_ap) {
                (Some(pre), Some(post)) if pre > 0.0 => Some(forgetting_pct(pre, post)),
                _ => None,
            },
            per_class_ap,
            per_class_ap50,
            per_class_ar,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Evaluates a checkpoint's teacher branch (the student when there is none)
/// on `test` with the split's class groups.
pub fn generalized_report(checkpoint: &Checkpoint, test: &Dataset, split: &FewShotSplit, base_ap_pretrain: Option<f64>) -> Result<EvalReport> {
    let known: BTreeSet<u64> = split.base_class_ids.union(&split.novel_class_ids).copied().collect();
    if let Some(c) = checkpoint.class_ids.iter().find(|c| !known.contains(c)) {
        return Err(Error::Eval(format!("checkpoint class {c} is neither base nor novel in the split")));
    }
    let params = checkpoint.teacher.as_ref().unwrap_or(&checkpoint.student);
    let inputs = run_inference(params, &checkpoint.class_ids, test)?;
    Ok(EvalReport::from_inputs(&inputs, &split.base_class_ids, &split.novel_class_ids, base_ap_pretrain))
}
