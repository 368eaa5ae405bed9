//! Pre-norm transformer encoder layers built on twin attention.

use alloc::format;
use alloc::vec::Vec;

use crate::attention::{twin_attention, AttnStats, TwinAttentionParams};
use crate::error::{Error, Result};
use crate::params::{join, BoundParams, Init, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    pub num_heads: usize,
    /// When false each layer keeps only its MLP block.
    pub use_attention: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            channels: 32,
            mlp_ratio: 4,
            num_heads: 4,
            use_attention: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "encoder channels and mlp_ratio must be >= 1".into(),
            ));
        }
        if self.num_heads == 0 || self.channels % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "{} channels are not divisible into {} heads",
                self.channels, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.mlp_ratio
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerParams {
    pub attn: Option<(Var, Var, TwinAttentionParams)>,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

impl EncoderLayerParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, init: &mut Init) {
        let c = cfg.channels;
        if cfg.use_attention {
            store.insert(join(prefix, "ln1.gamma"), Tensor::full(&[c], 1.0));
            store.insert(join(prefix, "ln1.beta"), Tensor::zeros(&[c]));
            TwinAttentionParams::declare(store, &join(prefix, "attn"), c, init);
        }
        store.insert(join(prefix, "ln2.gamma"), Tensor::full(&[c], 1.0));
        store.insert(join(prefix, "ln2.beta"), Tensor::zeros(&[c]));
        store.insert(
            join(prefix, "mlp.fc1.w"),
            init.fan_in(&[c, cfg.hidden()], c, 2.0),
        );
        store.insert(join(prefix, "mlp.fc1.b"), Tensor::zeros(&[cfg.hidden()]));
        store.insert(
            join(prefix, "mlp.fc2.w"),
            init.fan_in(&[cfg.hidden(), c], cfg.hidden(), 1.0),
        );
        store.insert(join(prefix, "mlp.fc2.b"), Tensor::zeros(&[c]));
    }

    pub fn bind(p: &BoundParams, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        let attn = if cfg.use_attention {
            Some((
                p.var(prefix, "ln1.gamma")?,
                p.var(prefix, "ln1.beta")?,
                TwinAttentionParams::bind(p, &join(prefix, "attn"), cfg.num_heads)?,
            ))
        } else {
            None
        };
        Ok(Self {
            attn,
            ln2_gamma: p.var(prefix, "ln2.gamma")?,
            ln2_beta: p.var(prefix, "ln2.beta")?,
            fc1_w: p.var(prefix, "mlp.fc1.w")?,
            fc1_b: p.var(prefix, "mlp.fc1.b")?,
            fc2_w: p.var(prefix, "mlp.fc2.w")?,
            fc2_b: p.var(prefix, "mlp.fc2.b")?,
        })
    }
}

pub fn declare(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, init: &mut Init) {
    for k in 0..cfg.num_layers {
        EncoderLayerParams::declare(store, &join(prefix, &format!("{k}")), cfg, init);
    }
}

pub fn bind(p: &BoundParams, prefix: &str, cfg: &EncoderConfig) -> Result<Vec<EncoderLayerParams>> {
    (0..cfg.num_layers)
        .map(|k| EncoderLayerParams::bind(p, &join(prefix, &format!("{k}")), cfg))
        .collect()
}

/// Attention branch output `TwinAttn(LN(x))`.
pub fn attention_branch(
    g: &mut Graph,
    x: Var,
    p: &EncoderLayerParams,
    stats: &mut AttnStats,
) -> Result<Option<Var>> {
    let Some((gamma, beta, attn)) = &p.attn else {
        return Ok(None);
    };
    let a = g.layer_norm(x, *gamma, *beta, LAYER_NORM_EPS)?;
    twin_attention(g, a, attn, stats).map(Some)
}

/// MLP branch output `fc2(gelu(fc1(LN(x))))`.
pub fn mlp_branch(g: &mut Graph, x: Var, p: &EncoderLayerParams) -> Result<Var> {
    let m = g.layer_norm(x, p.ln2_gamma, p.ln2_beta, LAYER_NORM_EPS)?;
    let m = g.linear(m, p.fc1_w, Some(p.fc1_b))?;
    let m = g.gelu(m);
    g.linear(m, p.fc2_w, Some(p.fc2_b))
}

/// `x1 = x + TwinAttn(LN(x))`, `out = x1 + MLP(LN(x1))`.
pub fn encoder_layer_forward(
    g: &mut Graph,
    x: Var,
    p: &EncoderLayerParams,
    stats: &mut AttnStats,
) -> Result<Var> {
    let x1 = match attention_branch(g, x, p, stats)? {
        Some(a) => g.add(x, a)?,
        None => x,
    };
    let m = mlp_branch(g, x1, p)?;
    g.add(x1, m)
}

pub fn encoder_stack_forward(
    g: &mut Graph,
    x: Var,
    layers: &[EncoderLayerParams],
    stats: &mut AttnStats,
) -> Result<Var> {
    layers
        .iter()
        .try_fold(x, |h, layer| encoder_layer_forward(g, h, layer, stats))
}
