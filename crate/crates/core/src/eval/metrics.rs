use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub category_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
    pub category_id: u64,
}

/// Class-agnostic scored box of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub image_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Detections kept per image and class, as in COCO's `maxDets`.
pub const MAX_DETS: usize = 100;

/// Descending score with a total tie-break on the box, so results do not
/// depend on input order.
fn by_score(a: &BBox, sa: f64, b: &BBox, sb: f64) -> Ordering {
    sb.total_cmp(&sa)
        .then_with(|| a.x1.total_cmp(&b.x1))
        .then_with(|| a.y1.total_cmp(&b.y1))
        .then_with(|| a.x2.total_cmp(&b.x2))
        .then_with(|| a.y2.total_cmp(&b.y2))
}

/// Greedy matching of score-sorted `dets` against `gts`: each detection
/// takes the unmatched ground truth of highest IoU at or above `t`.
fn greedy_match(dets: &[BBox], gts: &[BBox], t: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(d, g);
                if o >= t && best.is_none_or(|(bo, _)| o > bo) {
                    best = Some((o, j));
                }
            }
            match best {
                Some((_, j)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated precision of a score-sorted true-positive sequence.
pub fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return f64::NAN;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0.0, 0.0);
    for &t in tp {
        if t {
            ctp += 1.0;
        } else {
            cfp += 1.0;
        }
        precision.push(ctp / (ctp + cfp));
        recall.push(ctp / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let i = recall.partition_point(|&x| x < r);
        if i < precision.len() {
            sum += precision[i];
        }
    }
    sum / 101.0
}

/// Per class, per threshold: score-sorted TP flags over all images and the
/// ground-truth count.
fn class_matches(dets: &[Detection], gts: &[GroundTruth], thresholds: &[f64]) -> BTreeMap<u64, (Vec<Vec<bool>>, usize)> {
    let mut gt_by: BTreeMap<(u64, u64), Vec<BBox>> = BTreeMap::new();
    for g in gts {
        gt_by.entry((g.category_id, g.image_id)).or_default().push(g.bbox);
    }
    let mut det_by: BTreeMap<(u64, u64), Vec<(BBox, f64)>> = BTreeMap::new();
    for d in dets {
        det_by.entry((d.category_id, d.image_id)).or_default().push((d.bbox, d.score));
    }
    let mut out: BTreeMap<u64, (Vec<Vec<bool>>, usize)> = BTreeMap::new();
    for (&(c, _), g) in &gt_by {
        out.entry(c).or_insert_with(|| (Vec::new(), 0)).1 += g.len();
    }
    // (score, box, tp per threshold) per class
    let mut scored: BTreeMap<u64, Vec<(f64, BBox, Vec<bool>)>> = BTreeMap::new();
    for (&(c, img), ds) in det_by.iter_mut() {
        if !out.contains_key(&c) {
            continue;
        }
        ds.sort_by(|a, b| by_score(&a.0, a.1, &b.0, b.1));
        ds.truncate(MAX_DETS);
        let boxes: Vec<BBox> = ds.iter().map(|d| d.0).collect();
        let empty = Vec::new();
        let g = gt_by.get(&(c, img)).unwrap_or(&empty);
        let per_t: Vec<Vec<bool>> = thresholds.iter().map(|&t| greedy_match(&boxes, g, t)).collect();
        let entry = scored.entry(c).or_default();
        for (i, d) in ds.iter().enumerate() {
            entry.push((d.1, d.0, per_t.iter().map(|m| m[i]).collect()));
        }
    }
    for (c, mut v) in scored {
        v.sort_by(|a, b| by_score(&a.1, a.0, &b.1, b.0));
        let flags = (0..thresholds.len())
            .map(|t| v.iter().map(|e| e.2[t]).collect())
            .collect();
        out.get_mut(&c).unwrap().0 = flags;
    }
    out
}

/// Per-class AP averaged over `thresholds`; classes without ground truth are absent.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], thresholds: &[f64]) -> BTreeMap<u64, f64> {
    class_matches(dets, gts, thresholds)
        .into_iter()
        .map(|(c, (flags, n))| {
            let ap = (0..thresholds.len())
                .map(|t| flags.get(t).map_or(0.0, |f| interpolated_ap(f, n)))
                .sum::<f64>()
                / thresholds.len() as f64;
            (c, ap)
        })
        .collect()
}

/// Per-class detection recall averaged over `thresholds`.
pub fn detection_recall(dets: &[Detection], gts: &[GroundTruth], thresholds: &[f64]) -> BTreeMap<u64, f64> {
    class_matches(dets, gts, thresholds)
        .into_iter()
        .map(|(c, (flags, n))| {
            let r = (0..thresholds.len())
                .map(|t| flags.get(t).map_or(0, |f| f.iter().filter(|x| **x).count()) as f64 / n as f64)
                .sum::<f64>()
                / thresholds.len() as f64;
            (c, r)
        })
        .collect()
}

/// Class-agnostic recall of the top-`p` proposals per image, averaged over
/// the ten COCO thresholds. `None` without ground truth.
pub fn proposal_recall_at(proposals: &[Proposal], gts: &[GroundTruth], p: usize) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut gt_by: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
    for g in gts {
        gt_by.entry(g.image_id).or_default().push(g.bbox);
    }
    let mut prop_by: BTreeMap<u64, Vec<(BBox, f64)>> = BTreeMap::new();
    for q in proposals {
        prop_by.entry(q.image_id).or_default().push((q.bbox, q.score));
    }
    let thresholds = coco_thresholds();
    let mut matched = 0usize;
    for (img, g) in &gt_by {
        let Some(ps) = prop_by.get_mut(img) else {
            continue;
        };
        ps.sort_by(|a, b| by_score(&a.0, a.1, &b.0, b.1));
        let boxes: Vec<BBox> = ps.iter().take(p).map(|x| x.0).collect();
        for &t in &thresholds {
            matched += greedy_match(&boxes, g, t).iter().filter(|x| **x).count();
        }
    }
    Some(matched as f64 / (gts.len() * thresholds.len()) as f64)
}

/// Mean of the values whose key is in `classes`, `None` when there are none.
pub fn class_mean(values: &BTreeMap<u64, f64>, classes: impl IntoIterator<Item = u64>) -> Option<f64> {
    let v: Vec<f64> = classes.into_iter().filter_map(|c| values.get(&c).copied()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Relative base-class drop in percent.
pub fn forgetting_pct(base_ap_pretrain: f64, base_ap: f64) -> f64 {
    100.0 * (base_ap_pretrain - base_ap) / base_ap_pretrain
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(img: u64, b: BBox, c: u64) -> GroundTruth {
        GroundTruth {
            image_id: img,
            bbox: b,
            category_id: c,
        }
    }

    fn det(img: u64, b: BBox, s: f64, c: u64) -> Detection {
        Detection {
            image_id: img,
            bbox: b,
            score: s,
            category_id: c,
        }
    }

    #[test]
    fn perfect_and_empty() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let gts = [gt(1, b, 1), gt(2, b, 2)];
        let dets = [det(1, b, 1.0, 1), det(2, b, 1.0, 2)];
        let ap = average_precision(&dets, &gts, &coco_thresholds());
        assert_eq!(ap.values().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
        let ap = average_precision(&[], &gts, &coco_thresholds());
        assert_eq!(ap.values().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        // classes without ground truth are excluded
        let ap = average_precision(&[det(1, b, 0.9, 7)], &gts, &[0.5]);
        assert!(!ap.contains_key(&7));
    }

    #[test]
    fn interpolation_hand_table() {
        // TP, FP, TP with 3 ground truths: recall 1/3, 1/3, 2/3; precision 1, 1/2, 2/3
        // interpolated: r <= 1/3 -> 1, 1/3 < r <= 2/3 -> 2/3, beyond -> 0
        let ap = interpolated_ap(&[true, false, true], 3);
        let n1 = (0..=100).filter(|k| (*k as f64) / 100.0 <= 1.0 / 3.0).count() as f64;
        let n2 = (0..=100)
            .filter(|k| {
                let r = *k as f64 / 100.0;
                r > 1.0 / 3.0 && r <= 2.0 / 3.0
            })
            .count() as f64;
        assert!((ap - (n1 + n2 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
    }

    #[test]
    fn proposal_recall_fixture() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        // IoU 0.6 exactly: a 6-wide box inside the 10-wide one
        let p = BBox::new(0.0, 0.0, 10.0, 6.0);
        assert!((iou(&g, &p) - 0.6).abs() < 1e-12);
        let ar = proposal_recall_at(&[Proposal { image_id: 1, bbox: p, score: 0.5 }], &[gt(1, g, 1)], 100).unwrap();
        assert!((ar - 0.3).abs() < 1e-12);
        assert_eq!(proposal_recall_at(&[], &[gt(1, g, 1)], 100), Some(0.0));
        assert_eq!(proposal_recall_at(&[], &[], 100), None);
    }

    #[test]
    fn forgetting_reference_arithmetic() {
        assert!((forgetting_pct(44.4, 41.4) - 6.756756756756757).abs() < 1e-12);
        assert_eq!(forgetting_pct(39.3, 39.3), 0.0);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        let r = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!(r > 0.9 && r < 1.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..40.0f64, 0.0..40.0f64, 2.0..20.0f64, 2.0..20.0f64).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
    }

    proptest! {
        #[test]
        fn order_and_scale_invariance(
            gts in prop::collection::vec((1u64..4, arb_box(), 1u64..3), 1..8),
            dets in prop::collection::vec((1u64..4, arb_box(), 0.01..1.0f64, 1u64..3), 0..12),
            k in 0.1..10.0f64,
        ) {
            let gts: Vec<GroundTruth> = gts.into_iter().map(|(i, b, c)| gt(i, b, c)).collect();
            let dets: Vec<Detection> = dets.into_iter().map(|(i, b, s, c)| det(i, b, s, c)).collect();
            let t = coco_thresholds();
            let ap = average_precision(&dets, &gts, &t);
            let mut rev = dets.clone();
            rev.reverse();
            prop_assert_eq!(&ap, &average_precision(&rev, &gts, &t));
            let scaled: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score * k, ..*d }).collect();
            prop_assert_eq!(&ap, &average_precision(&scaled, &gts, &t));
            prop_assert!(ap.values().all(|v| (0.0..=1.0).contains(v)));

            let props: Vec<Proposal> = dets.iter().map(|d| Proposal { image_id: d.image_id, bbox: d.bbox, score: d.score }).collect();
            let mut last = 0.0;
            for p in [1, 2, 5, 100] {
                let r = proposal_recall_at(&props, &gts, p).unwrap();
                prop_assert!(r >= last);
                last = r;
            }
        }
    }
}
