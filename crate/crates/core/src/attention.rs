//! Twin (column-then-row) multi-head self-attention over an `h×w×c` grid.
//!
//! Column attention treats every column as an independent sequence of `h`
//! cells; row attention does the same for every row. Composing the two gives
//! each cell a global receptive field while materializing only
//! `h·w² + w·h²` query–key scores per head instead of `(h·w)²`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{join, BoundParams, Init, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Which attention variant a score count refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    Twin,
}

/// Number of query–key score entries per head for an `h×w` grid.
pub fn attention_score_count(h: u64, w: u64, mode: AttentionMode) -> u64 {
    match mode {
        AttentionMode::Full => (h * w) * (h * w),
        AttentionMode::Twin => h * w * w + w * h * h,
    }
}

/// Per-call instrumentation filled in by the attention forwards.
#[derive(Debug, Clone, Default)]
pub struct AttnStats {
    /// Score entries materialized, counted per head.
    pub score_entries: u64,
    /// Attention weight tensors (`sequences·heads × L × L`) in call order.
    pub weights: Vec<Var>,
}

/// Learnable row and column embeddings, each `n×c`.
#[derive(Debug, Clone, Copy)]
pub struct PositionalEmbeddings {
    pub row: Var,
    pub col: Var,
}

impl PositionalEmbeddings {
    pub fn declare(store: &mut ParamStore, prefix: &str, n: usize, c: usize, init: &mut Init) {
        store.insert(join(prefix, "row"), init.uniform(&[n, c], 0.02));
        store.insert(join(prefix, "col"), init.uniform(&[n, c], 0.02));
    }

    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Self {
            row: p.var(prefix, "row")?,
            col: p.var(prefix, "col")?,
        })
    }
}

/// `out[i, j] = x[i, j] + row[i] + col[j]`.
pub fn add_positional(g: &mut Graph, x: Var, pe: &PositionalEmbeddings) -> Result<Var> {
    let (h, w, c) = grid_dims(g, x)?;
    if g.shape(pe.row) != [h, c] || g.shape(pe.col) != [w, c] {
        return Err(shape_err(
            "add_positional",
            format!(
                "grid {:?} with row {:?} and col {:?}",
                g.shape(x),
                g.shape(pe.row),
                g.shape(pe.col)
            ),
        ));
    }
    let row = g.reshape(pe.row, &[h, 1, c])?;
    let y = g.add(x, row)?;
    g.add(y, pe.col)
}

/// Projection weights of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, c: usize, init: &mut Init) {
        for m in ["q", "k", "v", "o"] {
            store.insert(join(prefix, &format!("w{m}")), init.fan_in(&[c, c], c, 1.0));
            store.insert(join(prefix, &format!("b{m}")), Tensor::zeros(&[c]));
        }
    }

    pub fn bind(p: &BoundParams, prefix: &str, num_heads: usize) -> Result<Self> {
        Ok(Self {
            wq: p.var(prefix, "wq")?,
            bq: p.var(prefix, "bq")?,
            wk: p.var(prefix, "wk")?,
            bk: p.var(prefix, "bk")?,
            wv: p.var(prefix, "wv")?,
            bv: p.var(prefix, "bv")?,
            wo: p.var(prefix, "wo")?,
            bo: p.var(prefix, "bo")?,
            num_heads,
        })
    }
}

/// Column and row attention blocks applied in that order.
#[derive(Debug, Clone, Copy)]
pub struct TwinAttentionParams {
    pub column: AttentionParams,
    pub row: AttentionParams,
}

impl TwinAttentionParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, c: usize, init: &mut Init) {
        AttentionParams::declare(store, &join(prefix, "col"), c, init);
        AttentionParams::declare(store, &join(prefix, "row"), c, init);
    }

    pub fn bind(p: &BoundParams, prefix: &str, num_heads: usize) -> Result<Self> {
        Ok(Self {
            column: AttentionParams::bind(p, &join(prefix, "col"), num_heads)?,
            row: AttentionParams::bind(p, &join(prefix, "row"), num_heads)?,
        })
    }
}

fn grid_dims(g: &Graph, x: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(shape_err(
            "attention",
            format!("expected an h×w×c grid, got {s:?}"),
        )),
    }
}

fn head_dim(c: usize, heads: usize) -> Result<usize> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "{c} channels are not divisible into {heads} heads"
        )));
    }
    Ok(c / heads)
}

/// Scaled dot-product attention on `B×L×d` query/key/value batches.
fn attend(g: &mut Graph, q: Var, k: Var, v: Var, stats: &mut AttnStats) -> Result<Var> {
    let d = g.shape(q)[2];
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(d as f64));
    let weights = g.softmax_lastdim(scores)?;
    stats.weights.push(weights);
    g.batch_matmul(weights, v)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Column,
    Row,
}

fn axis_attention(
    g: &mut Graph,
    x: Var,
    p: &AttentionParams,
    axis: Axis,
    stats: &mut AttnStats,
) -> Result<Var> {
    let (h, w, c) = grid_dims(g, x)?;
    let heads = p.num_heads;
    let hd = head_dim(c, heads)?;
    // (i, j, head, d) -> one sequence per column (j, head) over i, or per row (i, head) over j
    let (to_seq, from_seq, batch, len) = match axis {
        Axis::Column => ([1, 2, 0, 3], [2, 0, 1, 3], w * heads, h),
        Axis::Row => ([0, 2, 1, 3], [0, 2, 1, 3], h * heads, w),
    };
    let project = |g: &mut Graph, wt: Var, b: Var| -> Result<Var> {
        let y = g.linear(x, wt, Some(b))?;
        let y = g.reshape(y, &[h, w, heads, hd])?;
        let y = g.permute(y, &to_seq)?;
        g.reshape(y, &[batch, len, hd])
    };
    let q = project(g, p.wq, p.bq)?;
    let k = project(g, p.wk, p.bk)?;
    let v = project(g, p.wv, p.bv)?;
    let ctx = attend(g, q, k, v, stats)?;
    stats.score_entries += (batch / heads * len * len) as u64;

    let unseq = match axis {
        Axis::Column => [w, heads, h, hd],
        Axis::Row => [h, heads, w, hd],
    };
    let ctx = g.reshape(ctx, &unseq)?;
    let ctx = g.permute(ctx, &from_seq)?;
    let ctx = g.reshape(ctx, &[h, w, c])?;
    g.linear(ctx, p.wo, Some(p.bo))
}

/// Multi-head self-attention within each column, independently.
pub fn column_attention(
    g: &mut Graph,
    x: Var,
    p: &AttentionParams,
    stats: &mut AttnStats,
) -> Result<Var> {
    axis_attention(g, x, p, Axis::Column, stats)
}

/// Multi-head self-attention within each row, independently.
pub fn row_attention(
    g: &mut Graph,
    x: Var,
    p: &AttentionParams,
    stats: &mut AttnStats,
) -> Result<Var> {
    axis_attention(g, x, p, Axis::Row, stats)
}

/// Column attention followed by row attention.
pub fn twin_attention(
    g: &mut Graph,
    x: Var,
    p: &TwinAttentionParams,
    stats: &mut AttnStats,
) -> Result<Var> {
    let y = column_attention(g, x, &p.column, stats)?;
    row_attention(g, y, &p.row, stats)
}

/// Standard multi-head self-attention over all `h·w` cells as one sequence.
pub fn full_attention(
    g: &mut Graph,
    x: Var,
    p: &AttentionParams,
    stats: &mut AttnStats,
) -> Result<Var> {
    let (h, w, c) = grid_dims(g, x)?;
    let heads = p.num_heads;
    let hd = head_dim(c, heads)?;
    let tokens = h * w;
    let project = |g: &mut Graph, wt: Var, b: Var| -> Result<Var> {
        let y = g.linear(x, wt, Some(b))?;
        let y = g.reshape(y, &[tokens, heads, hd])?;
        g.permute(y, &[1, 0, 2])
    };
    let q = project(g, p.wq, p.bq)?;
    let k = project(g, p.wk, p.bk)?;
    let v = project(g, p.wv, p.bv)?;
    let ctx = attend(g, q, k, v, stats)?;
    stats.score_entries += (tokens * tokens) as u64;
    let ctx = g.permute(ctx, &[1, 0, 2])?;
    let ctx = g.reshape(ctx, &[h, w, c])?;
    g.linear(ctx, p.wo, Some(p.bo))
}
