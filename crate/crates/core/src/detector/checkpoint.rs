//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header describing every tensor, then the tensors as little-endian `f64`
//! in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorConfig, DetectorParams, ParamGroup, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LEDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    /// Dataset category id of each foreground head index.
    pub class_ids: Vec<u64>,
    pub config_hash: String,
    pub student: DetectorParams,
    pub teacher: Option<DetectorParams>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: String,
    class_ids: Vec<u64>,
    config_hash: String,
    num_classes: usize,
    detector: DetectorConfig,
    branches: Vec<BranchHeader>,
}

#[derive(Serialize, Deserialize)]
struct BranchHeader {
    name: String,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn teacher(&self) -> Result<&DetectorParams> {
        self.teacher
            .as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint of stage '{}' has no teacher branch", self.stage)))
    }

    fn branches(&self) -> Vec<(&str, &DetectorParams)> {
        let mut v = vec![("student", &self.student)];
        if let Some(t) = &self.teacher {
            v.push(("teacher", t));
        }
        v
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.class_ids.len() + 1 != self.student.num_classes {
            return Err(Error::Checkpoint(format!(
                "{} class ids for a head with {} outputs",
                self.class_ids.len(),
                self.student.num_classes
            )));
        }
        if let Some(t) = &self.teacher {
            self.student.check_aligned(t)?;
        }
        let header = Header {
            stage: self.stage.clone(),
            class_ids: self.class_ids.clone(),
            config_hash: self.config_hash.clone(),
            num_classes: self.student.num_classes,
            detector: self.student.config.clone(),
            branches: self
                .branches()
                .into_iter()
                .map(|(name, p)| BranchHeader {
                    name: name.to_string(),
                    tensors: p.tensors.iter().map(|(k, t)| (k.clone(), t.shape.clone())).collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in self.branches() {
            for t in p.tensors.values() {
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = 20 + hlen;
        let mut branches: BTreeMap<String, DetectorParams> = BTreeMap::new();
        for b in header.branches {
            let mut tensors = BTreeMap::new();
            for (name, shape) in b.tensors {
                if ParamGroup::of(&name).is_none() {
                    return Err(Error::Checkpoint(format!("parameter {name} belongs to no group")));
                }
                let n: usize = shape.iter().product();
                let raw = bytes
                    .get(cursor..cursor + 8 * n)
                    .ok_or_else(|| Error::Checkpoint(format!("truncated data for {name}")))?;
                cursor += 8 * n;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                tensors.insert(name, Tensor { shape, data });
            }
            branches.insert(
                b.name,
                DetectorParams {
                    config: header.detector.clone(),
                    num_classes: header.num_classes,
                    tensors,
                },
            );
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let student = branches.remove("student").ok_or_else(|| bad("missing student branch"))?;
        let teacher = branches.remove("teacher");
        Ok(Checkpoint {
            stage: header.stage,
            class_ids: header.class_ids,
            config_hash: header.config_hash,
            student,
            teacher,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
