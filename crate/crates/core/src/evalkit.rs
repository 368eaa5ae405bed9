//! Binary masks, run-length encoding and COCO-style mask average precision.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(shape_err(
                "mask",
                format!("{height}×{width} mask with {} pixels", bits.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    /// Axis-aligned rectangle `[y0, y1) × [x0, x1)`.
    pub fn rect(height: usize, width: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            (y0..y1).contains(&y) && (x0..x1).contains(&x)
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    /// Thresholds a soft mask: `value >= threshold`.
    pub fn from_soft(height: usize, width: usize, values: &[f64], threshold: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            values.iter().map(|&v| v >= threshold).collect(),
        )
    }

    /// Replicates every pixel into an `fy×fx` block.
    pub fn upsample_nearest(&self, fy: usize, fx: usize) -> Self {
        Self::from_fn(self.height * fy, self.width * fx, |y, x| {
            self.get(y / fy, x / fx)
        })
    }

    /// A pixel is set when any pixel of its `fy×fx` source block is set.
    pub fn downsample_max(&self, fy: usize, fx: usize) -> Result<Self> {
        if fy == 0 || fx == 0 || self.height % fy != 0 || self.width % fx != 0 {
            return Err(shape_err(
                "downsample_max",
                format!("{}×{} by {fy}×{fx}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / fy, self.width / fx);
        let mut out = vec![false; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out[(y / fy) * w + x / fx] = true;
                }
            }
        }
        Self::new(h, w, out)
    }

    pub fn intersection(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }
}

/// `|a ∧ b| / |a ∨ b|` from precomputed counts, 0 when both are empty.
pub fn iou_from_counts(intersection: usize, area_a: usize, area_b: usize) -> f64 {
    let union = area_a + area_b - intersection;
    if union == 0 {
        0.0
    } else {
        intersection as f64 / union as f64
    }
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(shape_err(
            "mask_iou",
            format!("{}×{} vs {}×{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(iou_from_counts(a.intersection(b), a.area(), b.area()))
}

/// Run lengths of alternating 0s and 1s in row-major order, starting with a
/// (possibly empty) run of 0s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

pub fn rle_encode(mask: &BinaryMask) -> RleMask {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in &mask.bits {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    RleMask {
        height: mask.height,
        width: mask.width,
        counts,
    }
}

pub fn rle_decode(rle: &RleMask) -> Result<BinaryMask> {
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (rle.height * rle.width) as u64 {
        return Err(Error::Format(format!(
            "run lengths sum to {total}, expected {}×{}",
            rle.height, rle.width
        )));
    }
    let mut bits = Vec::with_capacity(rle.height * rle.width);
    for (i, &c) in rle.counts.iter().enumerate() {
        bits.extend(core::iter::repeat(i % 2 == 1).take(c as usize));
    }
    BinaryMask::new(rle.height, rle.width, bits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub class_id: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredInstance {
    pub class_id: usize,
    pub score: f64,
    pub mask: BinaryMask,
}

/// Ground truth and predictions for one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalImage {
    pub gts: Vec<GtInstance>,
    pub preds: Vec<PredInstance>,
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    core::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Score-ordered predictions of one class with their IoUs against that class's GTs.
struct ClassMatches {
    num_gt: usize,
    /// (image, pred index) in descending score order.
    order: Vec<(usize, usize)>,
    /// per image: gt indices of the class, and per pred index its IoU row
    gt_ids: Vec<Vec<usize>>,
    ious: Vec<BTreeMap<usize, Vec<f64>>>,
}

fn class_matches(images: &[EvalImage], class_id: usize) -> Result<ClassMatches> {
    let mut order = Vec::new();
    let mut gt_ids = Vec::with_capacity(images.len());
    let mut ious = Vec::with_capacity(images.len());
    let mut num_gt = 0;
    for (im, image) in images.iter().enumerate() {
        let gts: Vec<usize> = (0..image.gts.len())
            .filter(|&g| image.gts[g].class_id == class_id)
            .collect();
        num_gt += gts.len();
        let mut rows = BTreeMap::new();
        for (p, pred) in image.preds.iter().enumerate() {
            if pred.class_id != class_id {
                continue;
            }
            let row = gts
                .iter()
                .map(|&g| mask_iou(&pred.mask, &image.gts[g].mask))
                .collect::<Result<Vec<_>>>()?;
            rows.insert(p, row);
            order.push((im, p));
        }
        gt_ids.push(gts);
        ious.push(rows);
    }
    // stable: equal scores keep image then insertion order
    order.sort_by(|a, b| {
        let sa = images[a.0].preds[a.1].score;
        let sb = images[b.0].preds[b.1].score;
        sb.partial_cmp(&sa).unwrap_or(core::cmp::Ordering::Equal)
    });
    Ok(ClassMatches {
        num_gt,
        order,
        gt_ids,
        ious,
    })
}

fn ap_from_matches(m: &ClassMatches, iou_thr: f64) -> Option<f64> {
    if m.num_gt == 0 {
        return None;
    }
    let mut matched: Vec<Vec<bool>> = m.gt_ids.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(m.order.len());
    let mut recall = Vec::with_capacity(m.order.len());
    for (k, &(im, p)) in m.order.iter().enumerate() {
        let row = &m.ious[im][&p];
        let mut best: Option<usize> = None;
        for (g, &iou) in row.iter().enumerate() {
            if matched[im][g] || iou < iou_thr {
                continue;
            }
            if best.map_or(true, |b| iou > row[b]) {
                best = Some(g);
            }
        }
        if let Some(g) = best {
            matched[im][g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / m.num_gt as f64);
    }
    // precision envelope: max precision at any later (higher-recall) point
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&rc| rc < level);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some(total / 101.0)
}

/// 101-point interpolated AP of one class at one IoU threshold.
///
/// Returns `None` when the class has no ground truth.
pub fn average_precision(
    images: &[EvalImage],
    class_id: usize,
    iou_thr: f64,
) -> Result<Option<f64>> {
    Ok(ap_from_matches(&class_matches(images, class_id)?, iou_thr))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// AP averaged over the ten thresholds, per class present in the ground truth.
    pub per_class_ap: BTreeMap<usize, f64>,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Mask mAP over IoU thresholds 0.50:0.05:0.95, averaged over classes that
/// have ground truth.
pub fn coco_map(images: &[EvalImage]) -> Result<EvalReport> {
    let mut classes: Vec<usize> = images
        .iter()
        .flat_map(|im| im.gts.iter().map(|g| g.class_id))
        .collect();
    classes.sort_unstable();
    classes.dedup();

    let thresholds = iou_thresholds();
    let mut per_class_ap = BTreeMap::new();
    let (mut ap50, mut ap75) = (0.0, 0.0);
    for &c in &classes {
        let m = class_matches(images, c)?;
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| ap_from_matches(&m, t).expect("class has ground truth"))
            .collect();
        ap50 += aps[0];
        ap75 += aps[5];
        per_class_ap.insert(c, aps.iter().sum::<f64>() / aps.len() as f64);
    }
    let n = classes.len().max(1) as f64;
    Ok(EvalReport {
        ap: per_class_ap.values().sum::<f64>() / n,
        per_class_ap,
        ap50: ap50 / n,
        ap75: ap75 / n,
    })
}
