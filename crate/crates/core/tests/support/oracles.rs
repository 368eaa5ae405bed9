//! Direct, loop-based reference implementations and random case generators.

use docsegtr_core::evalkit::{BinaryMask, EvalImage, GtInstance, PredInstance};
use docsegtr_core::rng::SplitMix64;
use docsegtr_core::Tensor;

/// Mask logits `H×W×n×n` by explicit summation over every cell, kernel tap
/// and channel, with zero padding `(θ−1)/2`.
///
/// `features` is `H×W×c`, `kernels` is `n×n×(θ·θ·c)` with taps laid out
/// `(dy, dx, channel)`.
pub fn dynamic_conv_loop(features: &Tensor, kernels: &Tensor, theta: usize) -> Vec<f64> {
    let (h, w, c) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let n = kernels.shape()[0];
    let b = kernels.shape()[2];
    let r = (theta - 1) as isize / 2;
    let mut out = vec![0.0; h * w * n * n];
    for y in 0..h {
        for x in 0..w {
            for i in 0..n {
                for j in 0..n {
                    let mut acc = 0.0;
                    for dy in 0..theta {
                        for dx in 0..theta {
                            let yy = y as isize + dy as isize - r;
                            let xx = x as isize + dx as isize - r;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            for ch in 0..c {
                                let f = features.data()[(yy as usize * w + xx as usize) * c + ch];
                                let k =
                                    kernels.data()[(i * n + j) * b + (dy * theta + dx) * c + ch];
                                acc += f * k;
                            }
                        }
                    }
                    out[((y * w + x) * n + i) * n + j] = acc;
                }
            }
        }
    }
    out
}

pub fn pixel_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Gaussian Matrix NMS recomputed one instance at a time.
///
/// `items` must already be in rank order; returns the decayed scores in the
/// same order.
pub fn nms_sequential(items: &[(f64, Vec<bool>)], sigma: f64) -> Vec<f64> {
    let f = |x: f64| libm::exp(-(x * x) / sigma);
    let mut out = Vec::with_capacity(items.len());
    for j in 0..items.len() {
        let mut decay = 1.0f64;
        for i in 0..j {
            let iou = pixel_iou(&items[i].1, &items[j].1);
            let mut comp = 0.0f64;
            for k in 0..i {
                comp = comp.max(pixel_iou(&items[k].1, &items[i].1));
            }
            let den = f(comp);
            let ratio = if den > 0.0 {
                f(iou) / den
            } else {
                f64::INFINITY
            };
            decay = decay.min(ratio);
        }
        out.push(items[j].0 * decay);
    }
    out
}

/// 101-point AP of one class at one threshold; `None` without ground truth.
///
/// Predictions are taken in descending score order (ties by image, then
/// position); each claims the unmatched same-class GT of highest IoU ≥ `thr`.
/// Interpolated precision at recall `r` is the maximum precision over all
/// ranks whose recall reaches `r`.
pub fn ap_bruteforce(images: &[EvalImage], class_id: usize, thr: f64) -> Option<f64> {
    let num_gt: usize = images
        .iter()
        .map(|im| im.gts.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    if num_gt == 0 {
        return None;
    }
    let mut preds: Vec<(f64, usize, usize)> = Vec::new();
    for (im, image) in images.iter().enumerate() {
        for (p, pred) in image.preds.iter().enumerate() {
            if pred.class_id == class_id {
                preds.push((pred.score, im, p));
            }
        }
    }
    preds.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::new();
    for (k, &(_, im, p)) in preds.iter().enumerate() {
        let pm = images[im].preds[p].mask.bits();
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in images[im].gts.iter().enumerate() {
            if gt.class_id != class_id || taken[im][gi] {
                continue;
            }
            let iou = pixel_iou(pm, gt.mask.bits());
            if iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            taken[im][gi] = true;
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|&(_, prec)| prec)
            .fold(0.0, f64::max);
        total += best;
    }
    Some(total / 101.0)
}

pub fn thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// `(AP, AP@0.5, AP@0.75)` averaged over the classes present in GT.
pub fn map_bruteforce(images: &[EvalImage], num_classes: usize) -> (f64, f64, f64) {
    let classes: Vec<usize> = (0..num_classes)
        .filter(|&c| {
            images
                .iter()
                .any(|im| im.gts.iter().any(|g| g.class_id == c))
        })
        .collect();
    if classes.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let nc = classes.len() as f64;
    let at = |t: f64| {
        classes
            .iter()
            .map(|&c| ap_bruteforce(images, c, t).unwrap())
            .sum::<f64>()
            / nc
    };
    let ap = classes
        .iter()
        .map(|&c| {
            thresholds()
                .iter()
                .map(|&t| ap_bruteforce(images, c, t).unwrap())
                .sum::<f64>()
                / 10.0
        })
        .sum::<f64>()
        / nc;
    (ap, at(0.5), at(0.75))
}

pub fn random_rect_mask(r: &mut SplitMix64, h: usize, w: usize) -> BinaryMask {
    let y0 = r.below(h as u64) as usize;
    let x0 = r.below(w as u64) as usize;
    let y1 = r.range_inclusive(y0 + 1, h);
    let x1 = r.range_inclusive(x0 + 1, w);
    BinaryMask::rect(h, w, y0, x0, y1, x1)
}

/// A copy of `m` with each pixel flipped with probability `p`.
pub fn jitter(r: &mut SplitMix64, m: &BinaryMask, p: f64) -> BinaryMask {
    let bits = m
        .bits()
        .iter()
        .map(|&b| if r.next_f64() < p { !b } else { b })
        .collect();
    BinaryMask::new(m.height(), m.width(), bits).unwrap()
}

/// Small random evaluation case: 1–3 images of 6×6, up to 3 classes.
pub fn random_eval_case(seed: u64) -> Vec<EvalImage> {
    let mut r = SplitMix64::new(seed);
    let (h, w) = (6, 6);
    let num_images = r.range_inclusive(1, 3);
    (0..num_images)
        .map(|_| {
            let gts: Vec<GtInstance> = (0..r.range_inclusive(0, 4))
                .map(|_| GtInstance {
                    class_id: r.below(3) as usize,
                    mask: random_rect_mask(&mut r, h, w),
                })
                .collect();
            let preds = (0..r.range_inclusive(0, 5))
                .map(|_| {
                    let near_gt = !gts.is_empty() && r.next_f64() < 0.7;
                    let (class_id, mask) = if near_gt {
                        let g = &gts[r.below(gts.len() as u64) as usize];
                        let class = if r.next_f64() < 0.85 {
                            g.class_id
                        } else {
                            r.below(3) as usize
                        };
                        (class, jitter(&mut r, &g.mask, 0.15))
                    } else {
                        (r.below(3) as usize, random_rect_mask(&mut r, h, w))
                    };
                    PredInstance {
                        class_id,
                        score: r.next_f64(),
                        mask,
                    }
                })
                .collect();
            EvalImage { gts, preds }
        })
        .collect()
}
