//! On-disk synthetic datasets.
//!
//! ```text
//! dir/meta.txt          key=value echo of the generator config plus `count`
//! dir/annotations.txt   ground truth as eval records, one line per image
//! dir/000000.ppm ...    images, named by index
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use docsegtr_core::synthdoc::{generate_sample, GenConfig, LayoutSample};

use crate::error::{AppError, AppResult};
use crate::ppm::{read_ppm, write_ppm, RgbImage};
use crate::records::{read_records, write_records, ImageRecord};

pub const META_FILE: &str = "meta.txt";
pub const ANNOTATIONS_FILE: &str = "annotations.txt";

pub fn image_id(index: usize) -> String {
    format!("{index:06}")
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{}.ppm", image_id(index)))
}

/// Generator config and sample count read back from `meta.txt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetMeta {
    pub gen: GenConfig,
    pub count: usize,
}

impl DatasetMeta {
    pub fn encode(&self) -> String {
        let g = &self.gen;
        format!(
            "height={}\nwidth={}\nmin_instances={}\nmax_instances={}\nseed={}\ncount={}\n",
            g.height, g.width, g.min_instances, g.max_instances, g.seed, self.count
        )
    }

    pub fn decode(text: &str, path: &Path) -> AppResult<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                AppError::format(path, format!("line {}: expected key=value", i + 1))
            })?;
            kv.insert(k.trim(), v.trim());
        }
        let mut get = |key: &str| -> AppResult<u64> {
            let v = kv
                .remove(key)
                .ok_or_else(|| AppError::format(path, format!("missing key {key}")))?;
            v.parse()
                .map_err(|_| AppError::format(path, format!("{key}: not an integer: {v:?}")))
        };
        let gen = GenConfig {
            height: get("height")? as usize,
            width: get("width")? as usize,
            min_instances: get("min_instances")? as usize,
            max_instances: get("max_instances")? as usize,
            seed: get("seed")?,
        };
        let count = get("count")? as usize;
        if let Some(k) = kv.keys().next() {
            return Err(AppError::format(path, format!("unknown key {k}")));
        }
        gen.validate()
            .map_err(|e| AppError::format(path, e.to_string()))?;
        Ok(Self { gen, count })
    }
}

/// Renders `count` samples into `dir`. An existing non-empty directory is
/// only overwritten with `force`.
pub fn write_dataset(gen: &GenConfig, count: usize, dir: &Path, force: bool) -> AppResult<()> {
    gen.validate()?;
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| AppError::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(AppError::Usage(format!(
                "{} already exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut records = Vec::with_capacity(count);
    for index in 0..count {
        let s = generate_sample(gen, index as u64)?;
        write_ppm(&image_path(dir, index), &RgbImage::from_tensor(&s.image))?;
        records.push(ImageRecord::from_gt(
            image_id(index),
            gen.height,
            gen.width,
            &s.instances,
        ));
    }
    write_records(&dir.join(ANNOTATIONS_FILE), &records)?;
    let meta = DatasetMeta { gen: *gen, count };
    let path = dir.join(META_FILE);
    std::fs::write(&path, meta.encode()).map_err(|e| AppError::io(&path, e))
}

pub fn read_meta(dir: &Path) -> AppResult<DatasetMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
    DatasetMeta::decode(&text, &path)
}

/// Loads every sample of a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> AppResult<Vec<LayoutSample>> {
    let meta = read_meta(dir)?;
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let records = read_records(&ann_path)?;
    if records.len() != meta.count {
        return Err(AppError::format(
            &ann_path,
            format!("{} records for a dataset of {}", records.len(), meta.count),
        ));
    }
    let (h, w) = (meta.gen.height, meta.gen.width);
    records
        .iter()
        .enumerate()
        .map(|(index, rec)| {
            if rec.image_id != image_id(index) || rec.height != h || rec.width != w {
                return Err(AppError::format(
                    &ann_path,
                    format!(
                        "record {index} ({:?}, {}x{}) does not match the dataset",
                        rec.image_id, rec.width, rec.height
                    ),
                ));
            }
            let path = image_path(dir, index);
            let img = read_ppm(&path)?;
            if img.height != h || img.width != w {
                return Err(AppError::format(
                    &path,
                    format!("image is {}x{}, dataset is {w}x{h}", img.width, img.height),
                ));
            }
            let instances = rec
                .gts()
                .map_err(|e| AppError::format(&ann_path, e.to_string()))?;
            Ok(LayoutSample {
                image: img.to_tensor(),
                instances,
                seed: meta.gen.seed ^ index as u64,
            })
        })
        .collect()
}
