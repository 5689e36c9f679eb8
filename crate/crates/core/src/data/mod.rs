//! Dataset ingestion, split construction and the synthetic scene generator.

mod coco;
mod split;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub use coco::{load_coco_json, parse_coco_json, write_coco_json};
pub use split::{build_few_shot_split, sample_labeled_fraction, FewShotSplit};
pub use synth::{
    generate_synthetic_dataset, generate_synthetic_scene, ShapeKind, SyntheticScene,
    SyntheticSceneSpec,
};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub bbox: BBox,
    pub category_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// Validated, immutable view of a COCO-style annotation file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetIndex {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

impl DatasetIndex {
    /// Checks referential integrity and clips boxes to their image.
    pub fn new(
        images: Vec<ImageRecord>,
        mut annotations: Vec<Annotation>,
        categories: Vec<Category>,
    ) -> Result<Self> {
        let mut image_sizes = BTreeMap::new();
        for img in &images {
            if image_sizes
                .insert(img.id, (img.width as f64, img.height as f64))
                .is_some()
            {
                return Err(Error::Dataset(format!("duplicate image id {}", img.id)));
            }
        }
        let mut cat_ids = BTreeSet::new();
        for cat in &categories {
            if !cat_ids.insert(cat.id) {
                return Err(Error::Dataset(format!("duplicate category id {}", cat.id)));
            }
        }
        let mut ann_ids = BTreeSet::new();
        for ann in &mut annotations {
            if !ann_ids.insert(ann.id) {
                return Err(Error::Dataset(format!("duplicate annotation id {}", ann.id)));
            }
            let &(w, h) = image_sizes.get(&ann.image_id).ok_or_else(|| {
                Error::Dataset(format!(
                    "annotation {} references missing image {}",
                    ann.id, ann.image_id
                ))
            })?;
            if !cat_ids.contains(&ann.category_id) {
                return Err(Error::Dataset(format!(
                    "annotation {} references missing category {}",
                    ann.id, ann.category_id
                )));
            }
            if !ann.bbox.is_valid() {
                return Err(Error::Dataset(format!(
                    "annotation {} has a malformed box {:?}",
                    ann.id, ann.bbox
                )));
            }
            ann.bbox = ann.bbox.clip(w, h);
        }
        Ok(DatasetIndex {
            images,
            annotations,
            categories,
        })
    }

    pub fn image_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.images.iter().map(|i| i.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn category_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn annotation(&self, id: u64) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.id == id)
    }

    pub fn annotations_by_image(&self) -> BTreeMap<u64, Vec<&Annotation>> {
        let mut out: BTreeMap<u64, Vec<&Annotation>> =
            self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for ann in &self.annotations {
            out.entry(ann.image_id).or_default().push(ann);
        }
        out
    }

    /// Restricts the index to the given images (annotations follow).
    pub fn subset(&self, image_ids: &BTreeSet<u64>) -> DatasetIndex {
        DatasetIndex {
            images: self
                .images
                .iter()
                .filter(|i| image_ids.contains(&i.id))
                .cloned()
                .collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| image_ids.contains(&a.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
        }
    }
}

/// An index plus decoded pixels for every image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: DatasetIndex,
    pub pixels: BTreeMap<u64, Image>,
}

impl Dataset {
    /// Loads every image referenced by `index`, resolving file names against `root`.
    pub fn load(index: DatasetIndex, root: &Path) -> Result<Self> {
        let mut pixels = BTreeMap::new();
        for rec in &index.images {
            let path: PathBuf = root.join(&rec.file_name);
            let img = Image::load(&path)?;
            if img.width != rec.width as usize || img.height != rec.height as usize {
                return Err(Error::Dataset(format!(
                    "image {} is {}x{} on disk but {}x{} in the index",
                    rec.id, img.width, img.height, rec.width, rec.height
                )));
            }
            pixels.insert(rec.id, img);
        }
        Ok(Dataset { index, pixels })
    }

    pub fn image(&self, id: u64) -> &Image {
        &self.pixels[&id]
    }

    /// Writes `annotations.json` plus one PNG per image into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for rec in &self.index.images {
            let path = dir.join(&rec.file_name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            self.pixels[&rec.id].save_png(&path)?;
        }
        write_coco_json(&self.index, &dir.join("annotations.json"))
    }

    pub fn subset(&self, image_ids: &BTreeSet<u64>) -> Dataset {
        Dataset {
            index: self.index.subset(image_ids),
            pixels: self
                .pixels
                .iter()
                .filter(|(id, _)| image_ids.contains(id))
                .map(|(id, img)| (*id, img.clone()))
                .collect(),
        }
    }
}
