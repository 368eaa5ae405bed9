//! The full network: backbone, grid encoder, heads and mask branch.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{add_positional, AttnStats, PositionalEmbeddings};
use crate::backbone::{self, BackboneConfig};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::evalkit::{GtInstance, PredInstance};
use crate::heads::{
    category_head_forward, kernel_head_forward, CategoryHeadParams, GridPredictions,
    KernelHeadParams, KernelSpec,
};
use crate::lfam::{self, grid_to_level, lfam_fuse, MaskFeatureMap};
use crate::maskgen::{dynamic_conv_rows, predict_instances, InferenceConfig, InstanceSet};
use crate::params::{BoundParams, Init, ParamStore};
use crate::tensor::{Graph, Tensor, Var};
use crate::training::{assign_targets, total_loss, GridTargets, LossConfig};

/// Mask features live at 1/4 of the input resolution.
pub const MASK_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub c_stem: usize,
    pub c_fpn: usize,
    pub c_mask: usize,
    /// Grid side `n`.
    pub grid: usize,
    /// Dynamic kernel side `θ`.
    pub theta: usize,
    pub num_classes: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// When false the pooled grid goes straight to the heads.
    pub use_transformer: bool,
    /// When false encoder layers keep only their MLP blocks.
    pub use_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_h: 128,
            input_w: 128,
            c_stem: 16,
            c_fpn: 32,
            c_mask: 16,
            grid: 8,
            theta: 1,
            num_classes: 5,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 4,
            use_transformer: true,
            use_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            c_stem: self.c_stem,
            c_fpn: self.c_fpn,
            input_h: self.input_h,
            input_w: self.input_w,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            channels: self.c_fpn,
            mlp_ratio: self.mlp_ratio,
            num_heads: self.num_heads,
            use_attention: self.use_attention,
        }
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        KernelSpec {
            theta: self.theta,
            c_mask: self.c_mask,
        }
    }

    pub fn mask_size(&self) -> (usize, usize) {
        (self.input_h / MASK_STRIDE, self.input_w / MASK_STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.kernel_spec().validate()?;
        if self.use_transformer {
            self.encoder().validate()?;
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        let (h5, w5) = (self.input_h / 32, self.input_w / 32);
        let tiles = |a: usize, b: usize| a > 0 && b > 0 && (a % b == 0 || b % a == 0);
        if !tiles(self.grid, h5) || !tiles(self.grid, w5) {
            return Err(Error::Config(format!(
                "grid {} does not tile the {h5}×{w5} P5 level",
                self.grid
            )));
        }
        Ok(())
    }
}

/// Fresh parameters for `cfg`, drawn from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    backbone::declare(&mut store, "backbone", &cfg.backbone(), &mut init);
    if cfg.use_transformer {
        PositionalEmbeddings::declare(&mut store, "pos", cfg.grid, cfg.c_fpn, &mut init);
        encoder::declare(&mut store, "encoder", &cfg.encoder(), &mut init);
    }
    CategoryHeadParams::declare(&mut store, "cate", cfg.c_fpn, cfg.num_classes, &mut init);
    KernelHeadParams::declare(
        &mut store,
        "kernel",
        cfg.c_fpn,
        &cfg.kernel_spec(),
        &mut init,
    );
    lfam::declare(&mut store, "lfam", cfg.c_fpn, cfg.c_mask, &mut init);
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub preds: GridPredictions,
    pub features: MaskFeatureMap,
    pub stats: AttnStats,
}

/// Forward pass on a `3×H×W` image.
pub fn forward(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    image: Var,
) -> Result<ModelOutput> {
    let pyr = backbone::backbone_fpn_forward(g, p, "backbone", image)?;
    let mut grid = backbone::pool_to_grid(g, pyr.p5, cfg.grid)?;
    let mut stats = AttnStats::default();
    if cfg.use_transformer {
        let pe = PositionalEmbeddings::bind(p, "pos")?;
        grid = add_positional(g, grid, &pe)?;
        let layers = encoder::bind(p, "encoder", &cfg.encoder())?;
        grid = encoder::encoder_stack_forward(g, grid, &layers, &mut stats)?;
    }
    let cate = category_head_forward(g, grid, &CategoryHeadParams::bind(p, "cate")?)?;
    let kernels = kernel_head_forward(
        g,
        grid,
        &KernelHeadParams::bind(p, "kernel")?,
        &cfg.kernel_spec(),
    )?;
    let (h5, w5) = (g.shape(pyr.p5)[1], g.shape(pyr.p5)[2]);
    let p5t = grid_to_level(g, grid, h5, w5)?;
    let (h_m, w_m) = cfg.mask_size();
    let features = lfam_fuse(g, p, "lfam", pyr.p2, pyr.p3, pyr.p4, p5t, h_m, w_m)?;
    Ok(ModelOutput {
        preds: GridPredictions { cate, kernels },
        features,
        stats,
    })
}

/// Grid targets for ground truth at input resolution.
pub fn targets_for(cfg: &ModelConfig, gt: &[GtInstance]) -> Result<GridTargets> {
    let (h_m, w_m) = cfg.mask_size();
    assign_targets(gt, cfg.grid, cfg.num_classes, h_m, w_m)
}

/// Mask logits `H_m×W_m×P` for the positive cells only.
pub fn positive_mask_logits(
    g: &mut Graph,
    out: &ModelOutput,
    cfg: &ModelConfig,
    targets: &GridTargets,
) -> Result<Option<Var>> {
    if targets.pos_cells.is_empty() {
        return Ok(None);
    }
    let b = cfg.kernel_spec().params_per_kernel();
    let flat = g.reshape(out.preds.kernels, &[cfg.grid * cfg.grid, b])?;
    let rows: Vec<usize> = targets
        .pos_cells
        .iter()
        .map(|c| c.row * cfg.grid + c.col)
        .collect();
    let picked = g.gather_rows(flat, &rows)?;
    dynamic_conv_rows(g, &out.features, picked, &cfg.kernel_spec()).map(Some)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub total: f64,
    pub focal: f64,
    pub dice: f64,
    pub grads: BTreeMap<String, Vec<f64>>,
}

/// Loss and parameter gradients for one image.
pub fn loss_and_grads(
    store: &ParamStore,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    image: &Tensor,
    targets: &GridTargets,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let img = g.constant(image.clone());
    let out = forward(&mut g, &p, cfg, img)?;
    let logits = positive_mask_logits(&mut g, &out, cfg, targets)?;
    let terms = total_loss(&mut g, out.preds.cate, logits, targets, loss_cfg)?;
    let total = g.value(terms.total).data()[0];
    let focal = g.value(terms.focal).data()[0];
    let dice = terms.dice.map_or(0.0, |d| g.value(d).data()[0]);
    let mut grads = g.backward(terms.total)?;
    let grads = p.take_grads(&mut grads)?;
    Ok(StepOutput {
        total,
        focal,
        dice,
        grads,
    })
}

/// Mean loss and gradient over a batch, reduced in batch order.
pub fn batch_loss_and_grads(
    store: &ParamStore,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    batch: &[(&Tensor, &GridTargets)],
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut acc: Option<StepOutput> = None;
    for (image, targets) in batch {
        let s = loss_and_grads(store, cfg, loss_cfg, image, targets)?;
        acc = Some(match acc {
            None => s,
            Some(mut a) => {
                a.total += s.total;
                a.focal += s.focal;
                a.dice += s.dice;
                for (name, g) in s.grads {
                    let dst = a.grads.get_mut(&name).expect("same parameter set");
                    dst.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                a
            }
        });
    }
    let mut a = acc.expect("non-empty batch");
    a.total *= scale;
    a.focal *= scale;
    a.dice *= scale;
    for g in a.grads.values_mut() {
        g.iter_mut().for_each(|x| *x *= scale);
    }
    Ok(a)
}

/// Instances on one image; soft masks at mask-feature resolution.
pub fn predict(
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &Tensor,
    icfg: &InferenceConfig,
) -> Result<InstanceSet> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let img = g.constant(image.clone());
    let out = forward(&mut g, &p, cfg, img)?;
    predict_instances(
        g.value(out.preds.cate),
        g.value(out.preds.kernels),
        g.value(out.features.f),
        &cfg.kernel_spec(),
        icfg,
    )
}

/// Binarizes instance masks at `mask_thr` and upsamples them to input resolution.
pub fn export_predictions(set: &InstanceSet, mask_thr: f64) -> Vec<PredInstance> {
    set.items
        .iter()
        .map(|it| PredInstance {
            class_id: it.class_id,
            score: it.score,
            mask: it
                .binary_mask(mask_thr)
                .upsample_nearest(MASK_STRIDE, MASK_STRIDE),
        })
        .collect()
}
