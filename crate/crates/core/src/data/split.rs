use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetIndex;
use crate::error::{Error, Result};

/// Base/novel partition plus `k` sampled instances per class.
///
/// Shot sampling is instance-level: one image may contribute shots to
/// several classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub base_class_ids: BTreeSet<u64>,
    pub novel_class_ids: BTreeSet<u64>,
    pub k: usize,
    pub seed: u64,
    /// class id -> `(image_id, annotation_id)` pairs
    pub shot_instances: BTreeMap<u64, Vec<(u64, u64)>>,
}

impl FewShotSplit {
    /// Base classes first, then novel, each ascending. This is the class
    /// order of a detector head trained on the split.
    pub fn class_order(&self) -> Vec<u64> {
        self.base_class_ids
            .iter()
            .chain(self.novel_class_ids.iter())
            .copied()
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let split: FewShotSplit = serde_json::from_str(text)?;
        split.validate()?;
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.base_class_ids.intersection(&self.novel_class_ids).next() {
            return Err(Error::Split(format!("class {c} is both base and novel")));
        }
        Ok(())
    }

    /// True when every base and novel class has exactly `k` shots.
    pub fn is_balanced(&self) -> bool {
        self.base_class_ids
            .iter()
            .chain(&self.novel_class_ids)
            .all(|c| self.shot_instances.get(c).map(Vec::len) == Some(self.k))
    }

    /// Keeps only the shots of the given classes.
    pub fn restricted_to(&self, classes: &BTreeSet<u64>) -> FewShotSplit {
        FewShotSplit {
            shot_instances: self
                .shot_instances
                .iter()
                .filter(|(c, _)| classes.contains(c))
                .map(|(c, v)| (*c, v.clone()))
                .collect(),
            ..self.clone()
        }
    }
}

pub fn build_few_shot_split(
    index: &DatasetIndex,
    base: &BTreeSet<u64>,
    novel: &BTreeSet<u64>,
    k: usize,
    seed: u64,
) -> Result<FewShotSplit> {
    if let Some(c) = base.intersection(novel).next() {
        return Err(Error::Split(format!("class {c} is both base and novel")));
    }
    let known: BTreeSet<u64> = index.category_ids().into_iter().collect();
    if let Some(c) = base.union(novel).find(|c| !known.contains(c)) {
        return Err(Error::Split(format!("class {c} is not in the dataset")));
    }

    let mut by_class: BTreeMap<u64, Vec<(u64, u64)>> = BTreeMap::new();
    for ann in &index.annotations {
        by_class
            .entry(ann.category_id)
            .or_default()
            .push((ann.image_id, ann.id));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shots = BTreeMap::new();
    let mut short = Vec::new();
    for &class in base.union(novel) {
        let mut pool = by_class.remove(&class).unwrap_or_default();
        pool.sort_unstable_by_key(|&(_, ann)| ann);
        if pool.len() < k {
            short.push(format!("{class} ({} instances)", pool.len()));
            continue;
        }
        pool.shuffle(&mut rng);
        pool.truncate(k);
        pool.sort_unstable_by_key(|&(_, ann)| ann);
        shots.insert(class, pool);
    }
    if !short.is_empty() {
        return Err(Error::Split(format!(
            "fewer than {k} instances for classes: {}",
            short.join(", ")
        )));
    }
    Ok(FewShotSplit {
        base_class_ids: base.clone(),
        novel_class_ids: novel.clone(),
        k,
        seed,
        shot_instances: shots,
    })
}

/// Image-level labeled/unlabeled partition with
/// `round(percent / 100 * |images|)` labeled images. Both lists are sorted.
pub fn sample_labeled_fraction(
    index: &DatasetIndex,
    percent: f64,
    seed: u64,
) -> Result<(Vec<u64>, Vec<u64>)> {
    if index.images.is_empty() {
        return Err(Error::Split("cannot partition an empty dataset".into()));
    }
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Split(format!(
            "label percentage {percent} outside (0, 100]"
        )));
    }
    let mut ids = index.image_ids();
    let n_labeled = ((percent / 100.0) * ids.len() as f64).round() as usize;
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled = ids[..n_labeled].to_vec();
    let mut unlabeled = ids[n_labeled..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((labeled, unlabeled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Annotation, Category, ImageRecord};
    use crate::geometry::BBox;

    fn index(n_images: u64, n_classes: u64, per_image: u64) -> DatasetIndex {
        let images = (1..=n_images)
            .map(|id| ImageRecord {
                id,
                file_name: format!("{id}.png"),
                width: 64,
                height: 64,
            })
            .collect();
        let categories = (1..=n_classes)
            .map(|id| Category {
                id,
                name: format!("c{id}"),
            })
            .collect();
        let mut annotations = Vec::new();
        let mut next = 1;
        for img in 1..=n_images {
            for j in 0..per_image {
                annotations.push(Annotation {
                    id: next,
                    image_id: img,
                    bbox: BBox::new(1.0, 1.0, 9.0, 9.0),
                    category_id: 1 + (img + j) % n_classes,
                });
                next += 1;
            }
        }
        DatasetIndex::new(images, annotations, categories).unwrap()
    }

    #[test]
    fn one_shot_per_class() {
        let idx = index(20, 4, 2);
        let base: BTreeSet<u64> = [1, 2, 3].into();
        let novel: BTreeSet<u64> = [4].into();
        let split = build_few_shot_split(&idx, &base, &novel, 1, 7).unwrap();
        assert!(split.is_balanced());
        assert!(split.shot_instances.values().all(|v| v.len() == 1));
        assert_eq!(split.class_order(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let idx = index(30, 5, 3);
        let base: BTreeSet<u64> = [1, 2, 3, 4].into();
        let novel: BTreeSet<u64> = [5].into();
        let a = build_few_shot_split(&idx, &base, &novel, 5, 11).unwrap();
        let b = build_few_shot_split(&idx, &base, &novel, 5, 11).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = build_few_shot_split(&idx, &base, &novel, 5, 12).unwrap();
        assert_ne!(a.shot_instances, c.shot_instances);
        assert_eq!(FewShotSplit::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    #[test]
    fn json_key_order_is_stable() {
        let idx = index(10, 2, 1);
        let split =
            build_few_shot_split(&idx, &[1].into(), &[2].into(), 2, 3).unwrap();
        let text = split.to_json().unwrap();
        let pos = |k: &str| text.find(k).unwrap();
        assert!(pos("base_class_ids") < pos("novel_class_ids"));
        assert!(pos("novel_class_ids") < pos("\"k\""));
        assert!(pos("\"k\"") < pos("seed"));
        assert!(pos("seed") < pos("shot_instances"));
    }

    #[test]
    fn too_few_instances_lists_the_class() {
        let idx = index(4, 4, 1);
        let err = build_few_shot_split(&idx, &[1, 2].into(), &[3, 4].into(), 3, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("fewer than 3"), "{err}");
        assert!(err.contains('1') && err.contains('4'));
    }

    #[test]
    fn overlapping_partition_is_rejected() {
        let idx = index(4, 2, 1);
        assert!(build_few_shot_split(&idx, &[1, 2].into(), &[2].into(), 1, 0).is_err());
    }

    #[test]
    fn labeled_fraction() {
        let idx = index(1000, 3, 0);
        let (l, u) = sample_labeled_fraction(&idx, 10.0, 4).unwrap();
        assert_eq!(l.len(), 100);
        assert_eq!(u.len(), 900);
        let all: BTreeSet<u64> = l.iter().chain(&u).copied().collect();
        assert_eq!(all.len(), 1000);
        assert_eq!(sample_labeled_fraction(&idx, 10.0, 4).unwrap(), (l, u));

        let (l, u) = sample_labeled_fraction(&idx, 100.0, 4).unwrap();
        assert_eq!((l.len(), u.len()), (1000, 0));
        assert!(sample_labeled_fraction(&idx, 0.0, 4).is_err());
        assert!(sample_labeled_fraction(&DatasetIndex::default(), 10.0, 4).is_err());
    }

    proptest::proptest! {
        #[test]
        fn partition_is_disjoint_and_covering(n in 1u64..200, pct in 0.5f64..100.0, seed in proptest::prelude::any::<u64>()) {
            let idx = index(n, 2, 0);
            let (l, u) = sample_labeled_fraction(&idx, pct, seed).unwrap();
            let ls: BTreeSet<u64> = l.iter().copied().collect();
            proptest::prop_assert!(u.iter().all(|i| !ls.contains(i)));
            proptest::prop_assert_eq!(l.len() + u.len(), n as usize);
            proptest::prop_assert_eq!(l.len(), ((pct / 100.0) * n as f64).round() as usize);
        }
    }
}
