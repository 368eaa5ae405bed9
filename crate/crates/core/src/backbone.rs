//! Small strided CNN with a feature pyramid producing P2–P6.

use alloc::format;

use crate::error::{shape_err, Error, Result};
use crate::params::{join, BoundParams, Init, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub c_stem: usize,
    pub c_fpn: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            c_stem: 16,
            c_fpn: 32,
            input_h: 128,
            input_w: 128,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_stem == 0 || self.c_fpn == 0 {
            return Err(Error::Config("backbone widths must be >= 1".into()));
        }
        if self.input_h == 0
            || self.input_w == 0
            || self.input_h % 64 != 0
            || self.input_w % 64 != 0
        {
            return Err(Error::Config(format!(
                "input size {}x{} must be a positive multiple of 64",
                self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    /// Output channels of the stem and of stages C2..C5.
    pub fn stage_channels(&self) -> [usize; 5] {
        let c = self.c_stem;
        [c, 2 * c, 2 * c, 4 * c, 4 * c]
    }

    /// Closed-form parameter count of [`declare`].
    pub fn num_params(&self) -> usize {
        let ch = self.stage_channels();
        let mut total = ch[0] * 3 * 9 + ch[0];
        for s in 1..5 {
            total += ch[s] * ch[s - 1] * 9 + ch[s];
        }
        for &c in &ch[1..] {
            // lateral 1×1 and 3×3 smoothing
            total += self.c_fpn * c + self.c_fpn;
            total += self.c_fpn * self.c_fpn * 9 + self.c_fpn;
        }
        total
    }
}

/// Pyramid levels P2..P6, each `c_fpn × H/2^l × W/2^l`.
#[derive(Debug, Clone, Copy)]
pub struct PyramidFeatures {
    pub p2: Var,
    pub p3: Var,
    pub p4: Var,
    pub p5: Var,
    pub p6: Var,
}

impl PyramidFeatures {
    pub fn level(&self, l: u8) -> Option<Var> {
        match l {
            2 => Some(self.p2),
            3 => Some(self.p3),
            4 => Some(self.p4),
            5 => Some(self.p5),
            6 => Some(self.p6),
            _ => None,
        }
    }
}

const STAGES: [&str; 5] = ["stem", "c2", "c3", "c4", "c5"];

pub fn declare(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, init: &mut Init) {
    let ch = cfg.stage_channels();
    let mut c_prev = 3;
    for (name, &c) in STAGES.iter().zip(&ch) {
        let fan_in = c_prev * 9;
        store.insert(
            join(prefix, &format!("{name}.w")),
            init.fan_in(&[c, c_prev, 3, 3], fan_in, 2.0),
        );
        store.insert(join(prefix, &format!("{name}.b")), Tensor::zeros(&[c]));
        c_prev = c;
    }
    for (l, &c) in (2..=5).zip(&ch[1..]) {
        store.insert(
            join(prefix, &format!("lateral{l}.w")),
            init.fan_in(&[cfg.c_fpn, c, 1, 1], c, 1.0),
        );
        store.insert(
            join(prefix, &format!("lateral{l}.b")),
            Tensor::zeros(&[cfg.c_fpn]),
        );
        store.insert(
            join(prefix, &format!("smooth{l}.w")),
            init.fan_in(&[cfg.c_fpn, cfg.c_fpn, 3, 3], cfg.c_fpn * 9, 1.0),
        );
        store.insert(
            join(prefix, &format!("smooth{l}.b")),
            Tensor::zeros(&[cfg.c_fpn]),
        );
    }
}

/// Runs the backbone and FPN on a `3×H×W` image.
pub fn backbone_fpn_forward(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    image: Var,
) -> Result<PyramidFeatures> {
    let s = g.shape(image);
    if s.len() != 3 || s[0] != 3 || s[1] % 64 != 0 || s[2] % 64 != 0 {
        return Err(shape_err(
            "backbone",
            format!("expected a 3×H×W image with H, W divisible by 64, got {s:?}"),
        ));
    }
    let mut x = image;
    let mut stages = [image; 5];
    for (i, name) in STAGES.iter().enumerate() {
        let w = p.var(prefix, &format!("{name}.w"))?;
        let b = p.var(prefix, &format!("{name}.b"))?;
        let y = g.conv2d(x, w, Some(b), 2, 1)?;
        x = g.gelu(y);
        stages[i] = x;
    }

    let mut top: Option<Var> = None;
    let mut outs = [image; 4];
    for l in (2..=5usize).rev() {
        let w = p.var(prefix, &format!("lateral{l}.w"))?;
        let b = p.var(prefix, &format!("lateral{l}.b"))?;
        let mut m = g.conv2d(stages[l - 1], w, Some(b), 1, 0)?;
        if let Some(t) = top {
            let up = g.upsample_nearest2d(t, 2, 2)?;
            m = g.add(m, up)?;
        }
        top = Some(m);
        let w = p.var(prefix, &format!("smooth{l}.w"))?;
        let b = p.var(prefix, &format!("smooth{l}.b"))?;
        outs[l - 2] = g.conv2d(m, w, Some(b), 1, 1)?;
    }
    let p5 = outs[3];
    let (h5, w5) = (g.shape(p5)[1], g.shape(p5)[2]);
    let p6 = g.adaptive_avg_pool2d(p5, h5 / 2, w5 / 2)?;
    Ok(PyramidFeatures {
        p2: outs[0],
        p3: outs[1],
        p4: outs[2],
        p5,
        p6,
    })
}

/// Adaptive average pooling of a `c×H×W` map onto an `n×n×c` grid (row, col, channel).
pub fn pool_to_grid(g: &mut Graph, p5: Var, n: usize) -> Result<Var> {
    if n == 0 {
        return Err(Error::Config("grid size must be >= 1".into()));
    }
    let pooled = g.adaptive_avg_pool2d(p5, n, n)?;
    g.permute(pooled, &[1, 2, 0])
}
