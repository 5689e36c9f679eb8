use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,L_sup,L_cls_soft,L_reg_soft,L_ent,L_iou,total,lr";

/// Loss components of one optimizer step. Unlabeled terms are batch means
/// before the alpha/beta weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_sup: f64,
    pub l_cls_soft: f64,
    pub l_reg_soft: f64,
    pub l_ent: f64,
    pub l_iou: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.l_sup, self.l_cls_soft, self.l_reg_soft, self.l_ent, self.l_iou, self.total, self.lr
        )
    }

    pub fn parse_row(line: &str) -> Result<StepLog> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Config(format!("log row has {} fields: {line}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|e| Error::Config(format!("bad log value '{}': {e}", f[i])))
        };
        Ok(StepLog {
            step: f[0]
                .parse()
                .map_err(|e| Error::Config(format!("bad step '{}': {e}", f[0])))?,
            l_sup: num(1)?,
            l_cls_soft: num(2)?,
            l_reg_soft: num(3)?,
            l_ent: num(4)?,
            l_iou: num(5)?,
            total: num(6)?,
            lr: num(7)?,
        })
    }
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_csv(path: &Path, rows: &[StepLog]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Config(format!("{} is not a step log", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(StepLog::parse_row).collect()
}
