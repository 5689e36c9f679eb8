use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, Category, DatasetIndex, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: Option<f64>,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

pub fn parse_coco_json(text: &str) -> Result<DatasetIndex> {
    let file: CocoFile = serde_json::from_str(text)
        .map_err(|e| Error::Dataset(format!("malformed COCO json: {e}")))?;
    let mut annotations = Vec::with_capacity(file.annotations.len());
    for a in file.annotations {
        if a.iscrowd != 0 {
            return Err(Error::Dataset(format!(
                "annotation {} is a crowd region, which is not supported",
                a.id
            )));
        }
        let [x, y, w, h] = a.bbox;
        if ![x, y, w, h].iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(Error::Dataset(format!(
                "annotation {} has an invalid bbox {:?}",
                a.id, a.bbox
            )));
        }
        annotations.push(Annotation {
            id: a.id,
            image_id: a.image_id,
            bbox: BBox::from_xywh(x, y, w, h),
            category_id: a.category_id,
        });
    }
    let images = file
        .images
        .into_iter()
        .map(|i| ImageRecord {
            id: i.id,
            file_name: i.file_name,
            width: i.width,
            height: i.height,
        })
        .collect();
    let categories = file
        .categories
        .into_iter()
        .map(|c| Category { id: c.id, name: c.name })
        .collect();
    DatasetIndex::new(images, annotations, categories)
}

pub fn load_coco_json(path: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_coco_json(&text)
}

pub fn write_coco_json(index: &DatasetIndex, path: &Path) -> Result<()> {
    let file = CocoFile {
        images: index
            .images
            .iter()
            .map(|i| CocoImage {
                id: i.id,
                file_name: i.file_name.clone(),
                width: i.width,
                height: i.height,
            })
            .collect(),
        annotations: index
            .annotations
            .iter()
            .map(|a| CocoAnnotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: a.bbox.to_xywh(),
                area: Some(a.bbox.area()),
                iscrowd: 0,
            })
            .collect(),
        categories: index
            .categories
            .iter()
            .map(|c| CocoCategory {
                id: c.id,
                name: c.name.clone(),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
