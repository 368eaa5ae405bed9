//! Line-delimited instance records: a `docsegtr-eval v1` header line, then
//! one JSON object per image.
//!
//! ```text
//! docsegtr-eval v1
//! {"image_id":"000000","width":128,"height":128,"instances":[{"class_id":0,"score":0.93,"rle_counts":[130,12,...]}]}
//! ```
//!
//! `score` is present for predictions only. `rle_counts` alternate runs of
//! 0s and 1s in row-major order, starting with a (possibly empty) 0-run.

use std::path::Path;

use docsegtr_core::evalkit::{
    rle_decode, rle_encode, BinaryMask, GtInstance, PredInstance, RleMask,
};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const HEADER: &str = "docsegtr-eval v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub rle_counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub instances: Vec<InstanceRecord>,
}

impl ImageRecord {
    pub fn from_gt(image_id: String, height: usize, width: usize, gts: &[GtInstance]) -> Self {
        let instances = gts
            .iter()
            .map(|g| InstanceRecord {
                class_id: g.class_id,
                score: None,
                rle_counts: rle_encode(&g.mask).counts,
            })
            .collect();
        Self {
            image_id,
            width,
            height,
            instances,
        }
    }

    pub fn from_preds(
        image_id: String,
        height: usize,
        width: usize,
        preds: &[PredInstance],
    ) -> Self {
        let instances = preds
            .iter()
            .map(|p| InstanceRecord {
                class_id: p.class_id,
                score: Some(p.score),
                rle_counts: rle_encode(&p.mask).counts,
            })
            .collect();
        Self {
            image_id,
            width,
            height,
            instances,
        }
    }

    fn mask(&self, inst: &InstanceRecord) -> docsegtr_core::Result<BinaryMask> {
        rle_decode(&RleMask {
            height: self.height,
            width: self.width,
            counts: inst.rle_counts.clone(),
        })
    }

    pub fn gts(&self) -> docsegtr_core::Result<Vec<GtInstance>> {
        self.instances
            .iter()
            .map(|i| {
                Ok(GtInstance {
                    class_id: i.class_id,
                    mask: self.mask(i)?,
                })
            })
            .collect()
    }

    /// Prediction view; records without a score count as score 1.
    pub fn preds(&self) -> docsegtr_core::Result<Vec<PredInstance>> {
        self.instances
            .iter()
            .map(|i| {
                Ok(PredInstance {
                    class_id: i.class_id,
                    score: i.score.unwrap_or(1.0),
                    mask: self.mask(i)?,
                })
            })
            .collect()
    }
}

pub fn encode_records(records: &[ImageRecord]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn decode_records(text: &str, path: &Path) -> AppResult<Vec<ImageRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == HEADER => {}
        other => {
            return Err(AppError::format(
                path,
                format!(
                    "expected header {HEADER:?}, found {:?}",
                    other.unwrap_or("")
                ),
            ))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(line)
            .map_err(|e| AppError::format(path, format!("line {}: {e}", i + 2)))?;
        for inst in &rec.instances {
            let total: u64 = inst.rle_counts.iter().map(|&c| u64::from(c)).sum();
            if total != (rec.width * rec.height) as u64 {
                return Err(AppError::format(
                    path,
                    format!(
                        "line {}: run lengths sum to {total}, image is {}x{}",
                        i + 2,
                        rec.width,
                        rec.height
                    ),
                ));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> AppResult<Vec<ImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    decode_records(&text, path)
}

pub fn write_records(path: &Path, records: &[ImageRecord]) -> AppResult<()> {
    std::fs::write(path, encode_records(records)).map_err(|e| AppError::io(path, e))
}
