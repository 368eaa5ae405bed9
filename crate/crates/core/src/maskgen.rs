//! Per-cell dynamic convolution, Matrix NMS and instance assembly.

use alloc::format;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{shape_err, Error, Result};
use crate::evalkit::{iou_from_counts, BinaryMask};
use crate::heads::KernelSpec;
use crate::lfam::MaskFeatureMap;
use crate::tensor::{Graph, Tensor, Var};

/// Convolves the mask features with `m` kernels given as rows of an `m×b`
/// tensor, producing `H_m×W_m×m` logits.
pub fn dynamic_conv_rows(
    g: &mut Graph,
    f: &MaskFeatureMap,
    kernels: Var,
    spec: &KernelSpec,
) -> Result<Var> {
    spec.validate()?;
    let fs = g.shape(f.f).to_vec();
    if fs.len() != 3 || fs[2] != spec.c_mask {
        return Err(Error::Config(format!(
            "mask features {fs:?} do not carry {} channels",
            spec.c_mask
        )));
    }
    let ks = g.shape(kernels).to_vec();
    if ks.len() != 2 || ks[1] != spec.params_per_kernel() {
        return Err(Error::Config(format!(
            "kernels {ks:?} do not hold θ²·c = {} values",
            spec.params_per_kernel()
        )));
    }
    let (m, t, c) = (ks[0], spec.theta, spec.c_mask);
    let w = g.reshape(kernels, &[m, t, t, c])?;
    let w = g.permute(w, &[0, 3, 1, 2])?;
    let x = g.permute(f.f, &[2, 0, 1])?;
    let y = g.conv2d(x, w, None, 1, (t - 1) / 2)?;
    g.permute(y, &[1, 2, 0])
}

/// Mask logits `H_m×W_m×n×n`: one map per grid cell from its kernel in
/// `kernels` (`n×n×b`).
pub fn dynamic_conv(
    g: &mut Graph,
    f: &MaskFeatureMap,
    kernels: Var,
    spec: &KernelSpec,
) -> Result<Var> {
    let ks = g.shape(kernels).to_vec();
    if ks.len() != 3 {
        return Err(shape_err(
            "dynamic_conv",
            format!("expected n×n×b kernels, got {ks:?}"),
        ));
    }
    let rows = g.reshape(kernels, &[ks[0] * ks[1], ks[2]])?;
    let y = dynamic_conv_rows(g, f, rows, spec)?;
    let (h, w) = (g.shape(y)[0], g.shape(y)[1]);
    g.reshape(y, &[h, w, ks[0], ks[1]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class_id: usize,
    pub score: f64,
    /// `H_m×W_m` probabilities.
    pub soft_mask: Tensor,
    /// Grid cell `(row, col)` whose kernel produced the mask.
    pub cell: (usize, usize),
}

impl Instance {
    pub fn binary_mask(&self, threshold: f64) -> BinaryMask {
        let s = self.soft_mask.shape();
        BinaryMask::from_soft(s[0], s[1], self.soft_mask.data(), threshold)
            .expect("soft mask is two-dimensional")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceSet {
    pub items: Vec<Instance>,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Score descending, then cell row, cell column and class ascending.
pub fn rank_order(a: &Instance, b: &Instance) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.cell.cmp(&b.cell))
        .then(a.class_id.cmp(&b.class_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmsKernel {
    Gaussian,
    Linear,
}

/// Probability at which soft masks are binarized for NMS overlaps.
pub const NMS_MASK_THRESHOLD: f64 = 0.5;

fn decay_fn(kernel: NmsKernel, sigma: f64) -> impl Fn(f64) -> f64 {
    move |x| match kernel {
        NmsKernel::Gaussian => libm::exp(-(x * x) / sigma),
        NmsKernel::Linear => 1.0 - x,
    }
}

/// Decays every score by the overlap with higher-scored instances.
///
/// After sorting, `decay_j = min_{i<j} f(iou_ij) / f(comp_i)` where `comp_i`
/// is the largest IoU of `i` with anything ranked above it.
pub fn matrix_nms(set: InstanceSet, sigma: f64, kernel: NmsKernel) -> Result<InstanceSet> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Config(format!("NMS sigma must be > 0, got {sigma}")));
    }
    let mut items = set.items;
    items.sort_by(rank_order);
    let n = items.len();
    let masks: Vec<BinaryMask> = items
        .iter()
        .map(|it| it.binary_mask(NMS_MASK_THRESHOLD))
        .collect();
    let areas: Vec<usize> = masks.iter().map(BinaryMask::area).collect();

    // upper triangle only: iou[i][j] for i < j
    let mut iou = alloc::vec![alloc::vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if masks[i].bits().len() != masks[j].bits().len() {
                return Err(shape_err(
                    "matrix_nms",
                    "instances carry masks of different sizes",
                ));
            }
            iou[i][j] = iou_from_counts(masks[i].intersection(&masks[j]), areas[i], areas[j]);
        }
    }
    let comp: Vec<f64> = (0..n)
        .map(|i| (0..i).map(|k| iou[k][i]).fold(0.0, f64::max))
        .collect();
    let f = decay_fn(kernel, sigma);
    let decays: Vec<f64> = (0..n)
        .map(|j| {
            (0..j)
                .map(|i| {
                    let den = f(comp[i]);
                    if den > 0.0 {
                        f(iou[i][j]) / den
                    } else {
                        f64::INFINITY
                    }
                })
                .fold(1.0, f64::min)
        })
        .collect();
    for (it, d) in items.iter_mut().zip(decays) {
        it.score *= d;
    }
    items.sort_by(rank_order);
    Ok(InstanceSet { items })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    pub score_thr: f64,
    pub mask_thr: f64,
    pub nms_sigma: f64,
    pub top_k: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_thr: 0.1,
            mask_thr: 0.5,
            nms_sigma: 2.0,
            top_k: 100,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_thr) || !(0.0..=1.0).contains(&self.mask_thr) {
            return Err(Error::Config("thresholds must lie in [0, 1]".into()));
        }
        if self.nms_sigma.is_nan() || self.nms_sigma <= 0.0 {
            return Err(Error::Config(format!(
                "NMS sigma must be > 0, got {}",
                self.nms_sigma
            )));
        }
        Ok(())
    }
}

/// Selects confident cells, generates their masks, applies Matrix NMS and
/// keeps at most `top_k` instances still above `score_thr`.
///
/// `cate` is `n×n×q_c`, `kernels` is `n×n×b` and `features` is `H_m×W_m×c_mask`.
pub fn predict_instances(
    cate: &Tensor,
    kernels: &Tensor,
    features: &Tensor,
    spec: &KernelSpec,
    cfg: &InferenceConfig,
) -> Result<InstanceSet> {
    cfg.validate()?;
    let (cs, ks) = (cate.shape(), kernels.shape());
    if cs.len() != 3 || ks.len() != 3 || cs[..2] != ks[..2] {
        return Err(shape_err(
            "predict_instances",
            format!("cate {cs:?} with kernels {ks:?}"),
        ));
    }
    let (n_h, n_w, q) = (cs[0], cs[1], cs[2]);
    let b = ks[2];
    let mut picks = Vec::new();
    for i in 0..n_h {
        for j in 0..n_w {
            let probs = &cate.data()[(i * n_w + j) * q..(i * n_w + j + 1) * q];
            let mut best = 0;
            for c in 1..q {
                if probs[c] > probs[best] {
                    best = c;
                }
            }
            if probs[best] >= cfg.score_thr {
                picks.push((i, j, best, probs[best]));
            }
        }
    }
    if picks.is_empty() {
        return Ok(InstanceSet::default());
    }

    let mut rows = Vec::with_capacity(picks.len() * b);
    for &(i, j, _, _) in &picks {
        rows.extend_from_slice(&kernels.data()[(i * n_w + j) * b..(i * n_w + j + 1) * b]);
    }
    let mut g = Graph::new();
    let f = MaskFeatureMap {
        f: g.constant(features.clone()),
    };
    let k = g.constant(Tensor::new(&[picks.len(), b], rows)?);
    let logits = dynamic_conv_rows(&mut g, &f, k, spec)?;
    let probs = g.sigmoid(logits);
    let pv = g.value(probs);
    let (h, w, m) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);

    let items = picks
        .iter()
        .enumerate()
        .map(|(idx, &(i, j, class_id, score))| Instance {
            class_id,
            score,
            soft_mask: Tensor::from_fn(&[h, w], |p| pv.data()[p * m + idx]),
            cell: (i, j),
        })
        .collect();
    let mut out = matrix_nms(InstanceSet { items }, cfg.nms_sigma, NmsKernel::Gaussian)?;
    out.items.retain(|it| it.score >= cfg.score_thr);
    out.items.truncate(cfg.top_k);
    Ok(out)
}
