//! Layer-wise feature aggregation: fuses P2–P4 with the transformer-refined
//! P5 into one mask feature map at 1/4 input resolution.

use alloc::format;

use crate::error::{shape_err, Result};
use crate::params::{join, BoundParams, Init, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Unified mask features `f`, laid out `H_m × W_m × c_mask`.
#[derive(Debug, Clone, Copy)]
pub struct MaskFeatureMap {
    pub f: Var,
}

const LEVELS: [&str; 4] = ["p2", "p3", "p4", "p5"];

pub fn declare(store: &mut ParamStore, prefix: &str, c_fpn: usize, c_mask: usize, init: &mut Init) {
    for l in LEVELS {
        store.insert(
            join(prefix, &format!("{l}.w")),
            init.fan_in(&[c_fpn, c_fpn, 3, 3], c_fpn * 9, 2.0),
        );
        store.insert(join(prefix, &format!("{l}.b")), Tensor::zeros(&[c_fpn]));
    }
    store.insert(
        join(prefix, "fuse.w"),
        init.fan_in(&[c_mask, 4 * c_fpn, 1, 1], 4 * c_fpn, 1.0),
    );
    store.insert(join(prefix, "fuse.b"), Tensor::zeros(&[c_mask]));
}

/// Lays an `n×n×c` encoder grid out spatially at P5 resolution (`c×H5×W5`).
///
/// The grid is nearest-upsampled when P5 is an integer multiple of `n`, and
/// average-pooled when `n` is larger than P5.
pub fn grid_to_level(g: &mut Graph, grid: Var, h5: usize, w5: usize) -> Result<Var> {
    let s = g.shape(grid).to_vec();
    if s.len() != 3 {
        return Err(shape_err(
            "grid_to_level",
            format!("expected n×n×c grid, got {s:?}"),
        ));
    }
    let (n_h, n_w) = (s[0], s[1]);
    let x = g.permute(grid, &[2, 0, 1])?;
    if h5 % n_h == 0 && w5 % n_w == 0 {
        g.upsample_nearest2d(x, h5 / n_h, w5 / n_w)
    } else if n_h % h5 == 0 && n_w % w5 == 0 {
        g.adaptive_avg_pool2d(x, h5, w5)
    } else {
        Err(shape_err(
            "grid_to_level",
            format!("grid {n_h}×{n_w} does not tile level {h5}×{w5}"),
        ))
    }
}

/// Per-level 3×3 conv + gelu, nearest upsample to P2 size, channel concat,
/// point-wise conv to `c_mask`, then upsample to `out_h × out_w`.
#[allow(clippy::too_many_arguments)]
pub fn lfam_fuse(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    p2: Var,
    p3: Var,
    p4: Var,
    p5t: Var,
    out_h: usize,
    out_w: usize,
) -> Result<MaskFeatureMap> {
    let levels = [p2, p3, p4, p5t];
    let (c, h2, w2) = match *g.shape(p2) {
        [c, h, w] => (c, h, w),
        ref s => return Err(shape_err("lfam", format!("P2 must be c×H×W, got {s:?}"))),
    };
    let mut processed = [p2; 4];
    for (i, (&lvl, name)) in levels.iter().zip(LEVELS).enumerate() {
        let s = g.shape(lvl).to_vec();
        if s.len() != 3 || s[0] != c || h2 % s[1] != 0 || w2 % s[2] != 0 || h2 / s[1] != w2 / s[2] {
            return Err(shape_err(
                "lfam",
                format!(
                    "level {name} {s:?} is incompatible with P2 {:?}",
                    [c, h2, w2]
                ),
            ));
        }
        let w = p.var(prefix, &format!("{name}.w"))?;
        let b = p.var(prefix, &format!("{name}.b"))?;
        let y = g.conv2d(lvl, w, Some(b), 1, 1)?;
        let y = g.gelu(y);
        processed[i] = g.upsample_nearest2d(y, h2 / s[1], w2 / s[2])?;
    }
    let cat = g.concat(&processed, 0)?;
    let w = p.var(prefix, "fuse.w")?;
    let b = p.var(prefix, "fuse.b")?;
    let fused = g.conv2d(cat, w, Some(b), 1, 0)?;
    if out_h % h2 != 0 || out_w % w2 != 0 {
        return Err(shape_err(
            "lfam",
            format!("output {out_h}×{out_w} is not a multiple of P2 {h2}×{w2}"),
        ));
    }
    let up = g.upsample_nearest2d(fused, out_h / h2, out_w / w2)?;
    let f = g.permute(up, &[1, 2, 0])?;
    Ok(MaskFeatureMap { f })
}
