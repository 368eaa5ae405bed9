//! Finite-difference checks of every differentiable primitive and block.
//!
//! Each case differentiates `sum(y ⊙ R)` for a fixed random `R`, so that
//! every output element contributes with a distinct weight. Blocks are
//! checked with respect to their input and to every parameter tensor.

use docsegtr_core::attention::{
    full_attention, twin_attention, AttentionParams, AttnStats, TwinAttentionParams,
};
use docsegtr_core::backbone::{self, BackboneConfig};
use docsegtr_core::encoder::{encoder_layer_forward, EncoderConfig, EncoderLayerParams};
use docsegtr_core::evalkit::{BinaryMask, GtInstance};
use docsegtr_core::heads::{
    category_head_forward, kernel_head_forward, CategoryHeadParams, KernelHeadParams, KernelSpec,
};
use docsegtr_core::lfam::{self, MaskFeatureMap};
use docsegtr_core::maskgen::dynamic_conv;
use docsegtr_core::model::{forward, init_params, positive_mask_logits, targets_for, ModelConfig};
use docsegtr_core::params::{BoundParams, Init, ParamStore};
use docsegtr_core::rng::SplitMix64;
use docsegtr_core::tensor::{finite_diff_check_at, GradCheckReport};
use docsegtr_core::training::{assign_targets, dice_loss, focal_loss, total_loss, LossConfig};
use docsegtr_core::{Graph, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Coordinates checked per tensor; smaller tensors are checked exhaustively.
pub const MAX_COORDS: usize = 48;

pub struct GradCase {
    pub name: &'static str,
    pub run: fn() -> Result<GradCheckReport>,
}

pub fn random(shape: &[usize], seed: u64, bound: f64) -> Tensor {
    let mut r = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| r.symmetric(bound))
}

fn coords(n: usize, seed: u64) -> Vec<usize> {
    if n <= MAX_COORDS {
        return (0..n).collect();
    }
    let mut r = SplitMix64::new(seed);
    let mut picked: Vec<usize> = Vec::with_capacity(MAX_COORDS);
    while picked.len() < MAX_COORDS {
        let c = r.below(n as u64) as usize;
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked
}

/// `sum(y ⊙ R)` with `R` drawn from `seed`.
pub fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(random(g.shape(y), seed ^ 0xabcd, 1.0));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn merge(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    GradCheckReport {
        max_rel_err: a.max_rel_err.max(b.max_rel_err),
        pass: a.pass && b.pass,
        checked: a.checked + b.checked,
        skipped: a.skipped.into_iter().chain(b.skipped).collect(),
    }
}

fn empty() -> GradCheckReport {
    GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        skipped: vec![],
    }
}

fn check(f: impl Fn(&mut Graph, Var) -> Result<Var>, x: &Tensor) -> Result<GradCheckReport> {
    finite_diff_check_at(f, x, STEP, TOL, &coords(x.numel(), x.numel() as u64))
}

/// Checks an op of several inputs with respect to each input in turn.
fn check_inputs(
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut rep = empty();
    for k in 0..inputs.len() {
        let r = check(
            |g, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == k { x } else { g.constant(t.clone()) })
                    .collect();
                let y = f(g, &vars)?;
                probe(g, y, k as u64)
            },
            &inputs[k],
        )?;
        rep = merge(rep, r);
    }
    Ok(rep)
}

/// Replaces every parameter with a random value so no branch sits at a
/// degenerate point (zero biases, zero output projections).
pub fn randomize(store: &mut ParamStore, seed: u64) {
    for (i, (name, t)) in store.iter_mut().enumerate() {
        let r = random(t.shape(), seed + i as u64, 0.5);
        *t = if name.ends_with("gamma") {
            r.map(|v| 1.0 + 0.4 * v)
        } else {
            r
        };
    }
}

/// Checks a parameterized block with respect to its input and each parameter.
fn check_block(
    store: &ParamStore,
    input: &Tensor,
    f: impl Fn(&mut Graph, &BoundParams, Var) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut rep = check(
        |g, x| {
            let p = store.bind(g, false);
            let y = f(g, &p, x)?;
            probe(g, y, 1)
        },
        input,
    )?;
    for (name, t) in store.iter() {
        let r = check(
            |g, w| {
                let mut p = store.bind(g, false);
                p.replace(name, w)?;
                let x = g.constant(input.clone());
                let y = f(g, &p, x)?;
                probe(g, y, 1)
            },
            t,
        )?;
        rep = merge(rep, r);
    }
    Ok(rep)
}

fn unary(f: fn(&mut Graph, Var) -> Result<Var>) -> Result<GradCheckReport> {
    check_inputs(&[random(&[3, 5], 11, 2.0)], |g, v| f(g, v[0]))
}

fn matmul() -> Result<GradCheckReport> {
    check_inputs(
        &[random(&[3, 4], 1, 1.0), random(&[4, 5], 2, 1.0)],
        |g, v| g.matmul(v[0], v[1]),
    )
}

fn batch_matmul() -> Result<GradCheckReport> {
    check_inputs(
        &[random(&[2, 3, 4], 1, 1.0), random(&[2, 4, 3], 2, 1.0)],
        |g, v| g.batch_matmul(v[0], v[1]),
    )
}

fn add() -> Result<GradCheckReport> {
    check_inputs(
        &[random(&[2, 3, 4], 1, 1.0), random(&[3, 1], 2, 1.0)],
        |g, v| g.add(v[0], v[1]),
    )
}

fn sub() -> Result<GradCheckReport> {
    check_inputs(&[random(&[3, 4], 1, 1.0), random(&[4], 2, 1.0)], |g, v| {
        g.sub(v[0], v[1])
    })
}

fn mul() -> Result<GradCheckReport> {
    check_inputs(
        &[random(&[2, 3, 4], 1, 1.0), random(&[1, 4], 2, 1.0)],
        |g, v| g.mul(v[0], v[1]),
    )
}

fn layer_norm() -> Result<GradCheckReport> {
    let gamma = random(&[6], 2, 0.5).map(|v| 1.0 + v);
    check_inputs(
        &[random(&[2, 3, 6], 1, 2.0), gamma, random(&[6], 3, 0.5)],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6),
    )
}

fn conv2d() -> Result<GradCheckReport> {
    let inputs = [
        random(&[2, 5, 6], 1, 1.0),
        random(&[3, 2, 3, 3], 2, 1.0),
        random(&[3], 3, 1.0),
    ];
    let strided = check_inputs(&inputs, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1))?;
    let dense = check_inputs(&inputs[..2], |g, v| g.conv2d(v[0], v[1], None, 1, 0))?;
    Ok(merge(strided, dense))
}

fn adaptive_avg_pool2d() -> Result<GradCheckReport> {
    check_inputs(&[random(&[2, 5, 7], 1, 1.0)], |g, v| {
        g.adaptive_avg_pool2d(v[0], 3, 2)
    })
}

fn upsample_nearest2d() -> Result<GradCheckReport> {
    check_inputs(&[random(&[2, 3, 2], 1, 1.0)], |g, v| {
        g.upsample_nearest2d(v[0], 2, 3)
    })
}

fn concat() -> Result<GradCheckReport> {
    check_inputs(
        &[random(&[2, 3, 2], 1, 1.0), random(&[2, 1, 2], 2, 1.0)],
        |g, v| g.concat(v, 1),
    )
}

fn reshape_permute() -> Result<GradCheckReport> {
    check_inputs(&[random(&[2, 3, 4], 1, 1.0)], |g, v| {
        let y = g.permute(v[0], &[2, 0, 1])?;
        g.reshape(y, &[8, 3])
    })
}

fn gather_rows() -> Result<GradCheckReport> {
    check_inputs(&[random(&[4, 3], 1, 1.0)], |g, v| {
        g.gather_rows(v[0], &[2, 0, 2, 3])
    })
}

fn linear() -> Result<GradCheckReport> {
    check_inputs(
        &[
            random(&[2, 3, 4], 1, 1.0),
            random(&[4, 5], 2, 1.0),
            random(&[5], 3, 1.0),
        ],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    )
}

fn probabilities(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed, 0.45).map(|v| 0.5 + v)
}

fn focal() -> Result<GradCheckReport> {
    let target = Tensor::from_fn(&[2, 2, 3], |i| f64::from(u8::from(i % 5 == 1)));
    check(
        |g, p| focal_loss(g, p, &target, 0.25, 2.0),
        &probabilities(&[2, 2, 3], 1),
    )
}

fn dice() -> Result<GradCheckReport> {
    let q = Tensor::from_fn(&[1, 4, 4], |i| f64::from(u8::from(i % 3 == 0)));
    check(|g, p| dice_loss(g, p, &q), &probabilities(&[1, 4, 4], 2))
}

fn attention_params(store: &mut ParamStore, c: usize) {
    let mut init = Init::new(5);
    AttentionParams::declare(store, "full", c, &mut init);
    TwinAttentionParams::declare(store, "twin", c, &mut init);
    randomize(store, 40);
}

fn twin_attention_layer() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    attention_params(&mut store, 4);
    check_block(&store, &random(&[3, 2, 4], 1, 1.0), |g, p, x| {
        twin_attention(
            g,
            x,
            &TwinAttentionParams::bind(p, "twin", 2)?,
            &mut AttnStats::default(),
        )
    })
}

fn full_attention_layer() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    attention_params(&mut store, 4);
    check_block(&store, &random(&[2, 3, 4], 1, 1.0), |g, p, x| {
        full_attention(
            g,
            x,
            &AttentionParams::bind(p, "full", 2)?,
            &mut AttnStats::default(),
        )
    })
}

fn encoder_layer(use_attention: bool) -> Result<GradCheckReport> {
    let cfg = EncoderConfig {
        num_layers: 1,
        channels: 4,
        mlp_ratio: 2,
        num_heads: 2,
        use_attention,
    };
    let mut store = ParamStore::new();
    EncoderLayerParams::declare(&mut store, "layer", &cfg, &mut Init::new(6));
    randomize(&mut store, 60);
    check_block(&store, &random(&[3, 3, 4], 1, 1.0), |g, p, x| {
        encoder_layer_forward(
            g,
            x,
            &EncoderLayerParams::bind(p, "layer", &cfg)?,
            &mut AttnStats::default(),
        )
    })
}

fn category_head() -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    CategoryHeadParams::declare(&mut store, "cate", 4, 3, &mut Init::new(7));
    randomize(&mut store, 70);
    check_block(&store, &random(&[2, 2, 4], 1, 1.0), |g, p, x| {
        category_head_forward(g, x, &CategoryHeadParams::bind(p, "cate")?)
    })
}

fn kernel_head() -> Result<GradCheckReport> {
    let spec = KernelSpec {
        theta: 3,
        c_mask: 2,
    };
    let mut store = ParamStore::new();
    KernelHeadParams::declare(&mut store, "kernel", 4, &spec, &mut Init::new(8));
    randomize(&mut store, 80);
    check_block(&store, &random(&[2, 2, 4], 1, 1.0), |g, p, x| {
        kernel_head_forward(g, x, &KernelHeadParams::bind(p, "kernel")?, &spec)
    })
}

fn backbone_fpn() -> Result<GradCheckReport> {
    let cfg = BackboneConfig {
        c_stem: 2,
        c_fpn: 3,
        input_h: 64,
        input_w: 64,
    };
    let mut store = ParamStore::new();
    backbone::declare(&mut store, "backbone", &cfg, &mut Init::new(9));
    randomize(&mut store, 90);
    check_block(&store, &random(&[3, 64, 64], 1, 1.0), |g, p, x| {
        let pyr = backbone::backbone_fpn_forward(g, p, "backbone", x)?;
        let mut flat = Vec::new();
        for l in [pyr.p2, pyr.p3, pyr.p4, pyr.p5, pyr.p6] {
            let n = g.value(l).numel();
            flat.push(g.reshape(l, &[n])?);
        }
        g.concat(&flat, 0)
    })
}

/// LFAM over four levels packed into one input tensor.
fn lfam_block() -> Result<GradCheckReport> {
    let c = 3;
    let sizes = [8usize, 4, 2, 1];
    let total: usize = sizes.iter().map(|s| c * s * s).sum();
    let mut store = ParamStore::new();
    lfam::declare(&mut store, "lfam", c, 2, &mut Init::new(10));
    randomize(&mut store, 100);
    check_block(&store, &random(&[total], 1, 1.0), |g, p, x| {
        let mut levels = Vec::new();
        let mut offset = 0;
        for s in sizes {
            let n = c * s * s;
            let rows: Vec<usize> = (offset..offset + n).collect();
            let part = g.gather_rows(x, &rows)?;
            levels.push(g.reshape(part, &[c, s, s])?);
            offset += n;
        }
        let f = lfam::lfam_fuse(
            g, p, "lfam", levels[0], levels[1], levels[2], levels[3], 8, 8,
        )?;
        Ok(f.f)
    })
}

fn dynamic_conv_case(theta: usize) -> Result<GradCheckReport> {
    let spec = KernelSpec { theta, c_mask: 2 };
    let b = spec.params_per_kernel();
    check_inputs(
        &[random(&[5, 4, 2], 1, 1.0), random(&[2, 2, b], 2, 1.0)],
        |g, v| dynamic_conv(g, &MaskFeatureMap { f: v[0] }, v[1], &spec),
    )
}

/// Total loss with respect to category logits and positive mask logits.
fn total_loss_case() -> Result<GradCheckReport> {
    let (n, q, hm) = (4, 3, 4);
    let gt = vec![
        GtInstance {
            class_id: 1,
            mask: BinaryMask::rect(16, 16, 0, 0, 8, 6),
        },
        GtInstance {
            class_id: 2,
            mask: BinaryMask::rect(16, 16, 9, 8, 16, 16),
        },
    ];
    let targets = assign_targets(&gt, n, q, hm, hm)?;
    let cfg = LossConfig::default();
    let p = targets.num_pos();
    let run = |g: &mut Graph, cate_logits: Var, masks: Var| -> Result<Var> {
        let cate = g.sigmoid(cate_logits);
        Ok(total_loss(g, cate, Some(masks), &targets, &cfg)?.total)
    };
    let cate = random(&[n, n, q], 1, 2.0);
    let masks = random(&[hm, hm, p], 2, 2.0);
    let a = check(
        |g, x| {
            let m = g.constant(masks.clone());
            run(g, x, m)
        },
        &cate,
    )?;
    let b = check(
        |g, x| {
            let c = g.constant(cate.clone());
            run(g, c, x)
        },
        &masks,
    )?;
    Ok(merge(a, b))
}

/// Full network loss with respect to the image and every parameter tensor.
fn model_loss() -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        input_h: 64,
        input_w: 64,
        c_stem: 2,
        c_fpn: 4,
        c_mask: 2,
        grid: 4,
        num_layers: 1,
        num_heads: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    };
    let mut store = init_params(&cfg, 3)?;
    randomize(&mut store, 110);
    let gt = vec![GtInstance {
        class_id: 2,
        mask: BinaryMask::rect(64, 64, 8, 4, 40, 30),
    }];
    let targets = targets_for(&cfg, &gt)?;
    let loss_cfg = LossConfig::default();
    let image = random(&[3, 64, 64], 4, 0.5).map(|v| v + 0.5);
    let f = |g: &mut Graph, p: &BoundParams, x: Var| -> Result<Var> {
        let out = forward(g, p, &cfg, x)?;
        let logits = positive_mask_logits(g, &out, &cfg, &targets)?;
        Ok(total_loss(g, out.preds.cate, logits, &targets, &loss_cfg)?.total)
    };
    let mut rep = check(
        |g, x| {
            let p = store.bind(g, false);
            f(g, &p, x)
        },
        &image,
    )?;
    for (name, t) in store.iter() {
        let r = check(
            |g, w| {
                let mut p = store.bind(g, false);
                p.replace(name, w)?;
                let x = g.constant(image.clone());
                f(g, &p, x)
            },
            t,
        )?;
        rep = merge(rep, r);
    }
    Ok(rep)
}

pub fn all_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            run: matmul,
        },
        GradCase {
            name: "batch_matmul",
            run: batch_matmul,
        },
        GradCase {
            name: "add",
            run: add,
        },
        GradCase {
            name: "sub",
            run: sub,
        },
        GradCase {
            name: "mul",
            run: mul,
        },
        GradCase {
            name: "scale",
            run: || unary(|g, x| Ok(g.scale(x, -1.7))),
        },
        GradCase {
            name: "sigmoid",
            run: || unary(|g, x| Ok(g.sigmoid(x))),
        },
        GradCase {
            name: "gelu",
            run: || unary(|g, x| Ok(g.gelu(x))),
        },
        GradCase {
            name: "relu",
            run: || unary(|g, x| Ok(g.relu(x))),
        },
        GradCase {
            name: "sum",
            run: || unary(|g, x| Ok(g.sum(x))),
        },
        GradCase {
            name: "mean",
            run: || unary(|g, x| Ok(g.mean(x))),
        },
        GradCase {
            name: "softmax_lastdim",
            run: || unary(|g, x| g.softmax_lastdim(x)),
        },
        GradCase {
            name: "layer_norm",
            run: layer_norm,
        },
        GradCase {
            name: "conv2d",
            run: conv2d,
        },
        GradCase {
            name: "adaptive_avg_pool2d",
            run: adaptive_avg_pool2d,
        },
        GradCase {
            name: "upsample_nearest2d",
            run: upsample_nearest2d,
        },
        GradCase {
            name: "concat",
            run: concat,
        },
        GradCase {
            name: "reshape_permute",
            run: reshape_permute,
        },
        GradCase {
            name: "gather_rows",
            run: gather_rows,
        },
        GradCase {
            name: "linear",
            run: linear,
        },
        GradCase {
            name: "focal_loss",
            run: focal,
        },
        GradCase {
            name: "dice_loss",
            run: dice,
        },
        GradCase {
            name: "twin_attention",
            run: twin_attention_layer,
        },
        GradCase {
            name: "full_attention",
            run: full_attention_layer,
        },
        GradCase {
            name: "encoder_layer",
            run: || encoder_layer(true),
        },
        GradCase {
            name: "encoder_layer_mlp_only",
            run: || encoder_layer(false),
        },
        GradCase {
            name: "category_head",
            run: category_head,
        },
        GradCase {
            name: "kernel_head",
            run: kernel_head,
        },
        GradCase {
            name: "backbone_fpn",
            run: backbone_fpn,
        },
        GradCase {
            name: "lfam",
            run: lfam_block,
        },
        GradCase {
            name: "dynamic_conv_theta1",
            run: || dynamic_conv_case(1),
        },
        GradCase {
            name: "dynamic_conv_theta3",
            run: || dynamic_conv_case(3),
        },
        GradCase {
            name: "total_loss",
            run: total_loss_case,
        },
        GradCase {
            name: "model_loss",
            run: model_loss,
        },
    ]
}
