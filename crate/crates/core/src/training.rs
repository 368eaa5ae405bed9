//! Target assignment, losses and the SGD optimizer.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::evalkit::{BinaryMask, GtInstance};
use crate::params::ParamStore;
use crate::tensor::{Backward, Graph, Tensor, Var};

/// A grid cell owning one ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositiveCell {
    pub row: usize,
    pub col: usize,
    /// Index into the ground-truth list.
    pub instance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridTargets {
    /// `n×n×q_c` one-hot class targets.
    pub cate_t: Tensor,
    /// Positive cells in row-major order.
    pub pos_cells: Vec<PositiveCell>,
    /// `H_m×W_m` mask target of every positive cell.
    pub mask_t: Vec<BinaryMask>,
}

impl GridTargets {
    pub fn num_pos(&self) -> usize {
        self.pos_cells.len()
    }
}

/// Maps every instance to the cell holding its pixel-center centroid.
///
/// When several instances land on one cell the larger one wins, then the
/// lower class id. Mask targets are max-pooled to `h_m × w_m`.
pub fn assign_targets(
    gt: &[GtInstance],
    n: usize,
    num_classes: usize,
    h_m: usize,
    w_m: usize,
) -> Result<GridTargets> {
    if n == 0 || num_classes == 0 {
        return Err(Error::Config(
            "grid size and class count must be >= 1".into(),
        ));
    }
    let mut owner: Vec<Option<(usize, usize)>> = vec![None; n * n];
    for (idx, inst) in gt.iter().enumerate() {
        if inst.class_id >= num_classes {
            return Err(Error::Config(format!(
                "class id {} outside the {num_classes}-class catalog",
                inst.class_id
            )));
        }
        let (h, w) = (inst.mask.height(), inst.mask.width());
        let area = inst.mask.area();
        if area == 0 {
            log::warn!("instance {idx} has an empty mask and is skipped");
            continue;
        }
        let (mut sy, mut sx) = (0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if inst.mask.get(y, x) {
                    sy += y as f64 + 0.5;
                    sx += x as f64 + 0.5;
                }
            }
        }
        let cell = |c: f64, extent: usize| {
            let k = libm::floor(c / area as f64 / extent as f64 * n as f64) as usize;
            k.min(n - 1)
        };
        let (row, col) = (cell(sy, h), cell(sx, w));
        let slot = &mut owner[row * n + col];
        let beats = |cur: (usize, usize)| {
            let other = &gt[cur.0];
            (area, core::cmp::Reverse(inst.class_id)) > (cur.1, core::cmp::Reverse(other.class_id))
        };
        if slot.map_or(true, beats) {
            *slot = Some((idx, area));
        }
    }

    let mut cate_t = Tensor::zeros(&[n, n, num_classes]);
    let mut pos_cells = Vec::new();
    let mut mask_t = Vec::new();
    for (cell, slot) in owner.iter().enumerate() {
        let Some((idx, _)) = *slot else { continue };
        let mask = &gt[idx].mask;
        if mask.height() % h_m != 0 || mask.width() % w_m != 0 {
            return Err(shape_err(
                "assign_targets",
                format!("{}×{} mask onto {h_m}×{w_m}", mask.height(), mask.width()),
            ));
        }
        cate_t.data_mut()[cell * num_classes + gt[idx].class_id] = 1.0;
        pos_cells.push(PositiveCell {
            row: cell / n,
            col: cell % n,
            instance: idx,
        });
        mask_t.push(mask.downsample_max(mask.height() / h_m, mask.width() / w_m)?);
    }
    Ok(GridTargets {
        cate_t,
        pos_cells,
        mask_t,
    })
}

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-9;

fn focal_term(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if y > 0.5 {
        -alpha * libm::pow(1.0 - p, gamma) * libm::log(p)
    } else {
        -(1.0 - alpha) * libm::pow(p, gamma) * libm::log(1.0 - p)
    }
}

fn focal_grad(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if y > 0.5 {
        let pow_m1 = if gamma == 0.0 {
            0.0
        } else {
            gamma * libm::pow(1.0 - p, gamma - 1.0)
        };
        alpha * (pow_m1 * libm::log(p) - libm::pow(1.0 - p, gamma) / p)
    } else {
        let pow_m1 = if gamma == 0.0 {
            0.0
        } else {
            gamma * libm::pow(p, gamma - 1.0)
        };
        -(1.0 - alpha) * (pow_m1 * libm::log(1.0 - p) - libm::pow(p, gamma) / (1.0 - p))
    }
}

struct FocalRule {
    target: Vec<f64>,
    alpha: f64,
    gamma: f64,
    norm: f64,
}

impl Backward for FocalRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let scale = grad_output[0] / self.norm;
        let grad = inputs[0]
            .data()
            .iter()
            .zip(&self.target)
            .map(|(&p, &y)| {
                if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                    scale * focal_grad(p, y, self.alpha, self.gamma)
                } else {
                    0.0
                }
            })
            .collect();
        vec![Some(grad)]
    }
}

/// Number of groups along the last axis holding at least one positive.
fn positive_groups(target: &Tensor) -> usize {
    let q = target.shape().last().copied().unwrap_or(1).max(1);
    target
        .data()
        .chunks(q)
        .filter(|c| c.iter().any(|&y| y > 0.5))
        .count()
}

/// Sigmoid focal loss summed over every element and divided by the number of
/// positive cells (at least 1). Probabilities are clamped to `[1e-7, 1-1e-7]`.
pub fn focal_loss(g: &mut Graph, p: Var, target: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    if g.shape(p) != target.shape() {
        return Err(shape_err(
            "focal_loss",
            format!("{:?} vs target {:?}", g.shape(p), target.shape()),
        ));
    }
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    let pv = g.value(p).data();
    let clamped = pv.iter().filter(|&&x| !(lo..=hi).contains(&x)).count();
    if clamped > 0 {
        log::debug!("focal loss clamped {clamped} probabilities");
    }
    let norm = positive_groups(target).max(1) as f64;
    let total: f64 = pv
        .iter()
        .zip(target.data())
        .map(|(&x, &y)| focal_term(x.clamp(lo, hi), y, alpha, gamma))
        .sum();
    let sides: Vec<bool> = pv.iter().flat_map(|&x| [x >= lo, x <= hi]).collect();
    g.record_kinks(sides);
    let rule = FocalRule {
        target: target.data().to_vec(),
        alpha,
        gamma,
        norm,
    };
    Ok(g.custom(&[p], Tensor::scalar(total / norm), Box::new(rule)))
}

struct DiceRule {
    q: Vec<f64>,
}

impl Backward for DiceRule {
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let p = inputs[0].data();
        let (spq, spp, sqq) = dice_sums(p, &self.q);
        let d = spp + sqq + DICE_EPS;
        let go = grad_output[0];
        let grad = p
            .iter()
            .zip(&self.q)
            .map(|(&pk, &qk)| go * (-2.0 * qk / d + 4.0 * spq * pk / (d * d)))
            .collect();
        vec![Some(grad)]
    }
}

fn dice_sums(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    p.iter()
        .zip(q)
        .fold((0.0, 0.0, 0.0), |(a, b, c), (&x, &y)| {
            (a + x * y, b + x * x, c + y * y)
        })
}

/// `1 − 2Σpq / (Σp² + Σq² + ε)`.
pub fn dice_loss(g: &mut Graph, p: Var, q: &Tensor) -> Result<Var> {
    if g.shape(p) != q.shape() {
        return Err(shape_err(
            "dice_loss",
            format!("{:?} vs target {:?}", g.shape(p), q.shape()),
        ));
    }
    let (spq, spp, sqq) = dice_sums(g.value(p).data(), q.data());
    let value = 1.0 - 2.0 * spq / (spp + sqq + DICE_EPS);
    let rule = DiceRule {
        q: q.data().to_vec(),
    };
    Ok(g.custom(&[p], Tensor::scalar(value), Box::new(rule)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_mask: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            lambda_mask: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub focal: Var,
    /// Mean dice over positive cells; `None` without positives.
    pub dice: Option<Var>,
}

/// Picks the logit maps of the given cells out of an `H_m×W_m×n×n`
/// dynamic-conv output, giving `H_m×W_m×P`.
pub fn select_cells(g: &mut Graph, masks: Var, cells: &[PositiveCell]) -> Result<Var> {
    let s = g.shape(masks).to_vec();
    if s.len() != 4 || cells.is_empty() {
        return Err(shape_err(
            "select_cells",
            format!("{} cells from {s:?}", cells.len()),
        ));
    }
    let flat = g.reshape(masks, &[s[0] * s[1], s[2] * s[3]])?;
    let t = g.permute(flat, &[1, 0])?;
    let rows: Vec<usize> = cells.iter().map(|c| c.row * s[3] + c.col).collect();
    let picked = g.gather_rows(t, &rows)?;
    let back = g.permute(picked, &[1, 0])?;
    g.reshape(back, &[s[0], s[1], cells.len()])
}

/// `focal + λ · mean dice`, where column `k` of `mask_logits` (`H_m×W_m×P`)
/// belongs to `targets.pos_cells[k]`.
pub fn total_loss(
    g: &mut Graph,
    cate: Var,
    mask_logits: Option<Var>,
    targets: &GridTargets,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let focal = focal_loss(g, cate, &targets.cate_t, cfg.alpha, cfg.gamma)?;
    let np = targets.num_pos();
    let Some(logits) = mask_logits.filter(|_| np > 0) else {
        return Ok(LossTerms {
            total: focal,
            focal,
            dice: None,
        });
    };
    let s = g.shape(logits).to_vec();
    if s.len() != 3 || s[2] != np {
        return Err(shape_err(
            "total_loss",
            format!("mask logits {s:?} for {np} positive cells"),
        ));
    }
    let probs = g.sigmoid(logits);
    let per_cell = g.permute(probs, &[2, 0, 1])?;
    let mut acc: Option<Var> = None;
    for (k, mt) in targets.mask_t.iter().enumerate() {
        if (mt.height(), mt.width()) != (s[0], s[1]) {
            return Err(shape_err(
                "total_loss",
                format!("mask target {}×{} vs logits {s:?}", mt.height(), mt.width()),
            ));
        }
        let pk = g.gather_rows(per_cell, &[k])?;
        let q = Tensor::from_fn(&[1, s[0], s[1]], |i| f64::from(u8::from(mt.bits()[i])));
        let d = dice_loss(g, pk, &q)?;
        acc = Some(match acc {
            Some(a) => g.add(a, d)?,
            None => d,
        });
    }
    let dice = g.scale(acc.expect("at least one positive"), 1.0 / np as f64);
    let weighted = g.scale(dice, cfg.lambda_mask);
    let total = g.add(focal, weighted)?;
    Ok(LossTerms {
        total,
        focal,
        dice: Some(dice),
    })
}

/// SGD with Nesterov momentum, L2 weight decay and a warmup/step schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr_base: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Vec<f64>>,
    pub iter: u64,
    pub warmup_iters: u64,
    pub milestones: Vec<u64>,
}

impl OptimizerState {
    pub fn new(
        lr_base: f64,
        momentum: f64,
        weight_decay: f64,
        warmup_iters: u64,
        milestones: Vec<u64>,
    ) -> Self {
        Self {
            lr_base,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
            iter: 0,
            warmup_iters,
            milestones,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr_ok = self.lr_base > 0.0 && self.lr_base.is_finite();
        let wd_ok = self.weight_decay >= 0.0 && self.weight_decay.is_finite();
        if !lr_ok || !(0.0..1.0).contains(&self.momentum) || !wd_ok {
            return Err(Error::Config(format!(
                "need lr > 0, 0 <= momentum < 1, weight decay >= 0 (got {}, {}, {})",
                self.lr_base, self.momentum, self.weight_decay
            )));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "milestones must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate used for step `iter` (0-based).
pub fn lr_at(iter: u64, state: &OptimizerState) -> f64 {
    if iter < state.warmup_iters {
        return state.lr_base * (iter + 1) as f64 / state.warmup_iters as f64;
    }
    let passed = state.milestones.iter().filter(|&&m| iter >= m).count();
    state.lr_base / libm::pow(10.0, passed as f64)
}

/// One optimizer step; returns the learning rate it used.
///
/// `g = grad + wd·p`, `v = μ·v + g`, `p = p − lr·(g + μ·v)`.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
) -> Result<f64> {
    for (name, t) in params.iter() {
        match grads.get(name) {
            None => return Err(Error::Contract(format!("missing gradient for {name}"))),
            Some(gr) if gr.len() != t.numel() => {
                return Err(shape_err(
                    "sgd_step",
                    format!(
                        "gradient of {name} has {} values for {}",
                        gr.len(),
                        t.numel()
                    ),
                ))
            }
            Some(_) => {}
        }
    }
    let lr = lr_at(state.iter, state);
    let (mu, wd) = (state.momentum, state.weight_decay);
    for (name, t) in params.iter_mut() {
        let gr = &grads[name];
        let v = state
            .velocity
            .entry(String::from(name))
            .or_insert_with(|| vec![0.0; gr.len()]);
        for ((p, &gk), vk) in t.data_mut().iter_mut().zip(gr).zip(v.iter_mut()) {
            let gk = gk + wd * *p;
            *vk = mu * *vk + gk;
            *p -= lr * (gk + mu * *vk);
        }
    }
    state.iter += 1;
    Ok(lr)
}

/// Rounds parameters and velocities to `f32`, so a checkpoint stored at that
/// precision resumes exactly where training left off.
pub fn quantize_f32(params: &mut ParamStore, state: &mut OptimizerState) {
    let round = |x: &mut f64| *x = f64::from(*x as f32);
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(round);
    }
    for v in state.velocity.values_mut() {
        v.iter_mut().for_each(round);
    }
}
