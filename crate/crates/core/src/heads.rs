//! Category and dynamic-kernel heads applied to every grid cell.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{join, BoundParams, Init, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Ordered, unique class names; the class id is the index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config(
                "class catalog must hold at least one class".into(),
            ));
        }
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// text, title, list, table, figure
    pub fn document() -> Self {
        Self::new(&["text", "title", "list", "table", "figure"]).expect("static catalog")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Shape of the per-cell dynamic kernels: `b = theta² · c_mask` values each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSpec {
    pub theta: usize,
    pub c_mask: usize,
}

impl KernelSpec {
    pub fn new(theta: usize, c_mask: usize) -> Result<Self> {
        let spec = Self { theta, c_mask };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta == 0 || self.theta % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel size {} must be odd",
                self.theta
            )));
        }
        if self.c_mask == 0 {
            return Err(Error::Config("mask channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn params_per_kernel(&self) -> usize {
        self.theta * self.theta * self.c_mask
    }
}

/// Head outputs on the `n×n` grid.
#[derive(Debug, Clone, Copy)]
pub struct GridPredictions {
    /// `n×n×q_c` independent class probabilities.
    pub cate: Var,
    /// `n×n×b` unconstrained kernel weights.
    pub kernels: Var,
}

/// Prior probability the category bias is initialized to.
pub const CATEGORY_PRIOR: f64 = 0.01;

/// Variance gain of the kernel-head weights.
pub const KERNEL_INIT_GAIN: f64 = 1e-2;

#[derive(Debug, Clone, Copy)]
pub struct CategoryHeadParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl CategoryHeadParams {
    pub fn declare(store: &mut ParamStore, prefix: &str, c: usize, q_c: usize, init: &mut Init) {
        store.insert(join(prefix, "fc1.w"), init.fan_in(&[c, c], c, 2.0));
        store.insert(join(prefix, "fc1.b"), Tensor::zeros(&[c]));
        store.insert(join(prefix, "fc2.w"), init.fan_in(&[c, q_c], c, 0.1));
        let prior = -libm::log((1.0 - CATEGORY_PRIOR) / CATEGORY_PRIOR);
        store.insert(join(prefix, "fc2.b"), Tensor::full(&[q_c], prior));
    }

    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: p.var(prefix, "fc1.w")?,
            b1: p.var(prefix, "fc1.b")?,
            w2: p.var(prefix, "fc2.w")?,
            b2: p.var(prefix, "fc2.b")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KernelHeadParams {
    pub w: Var,
    pub b: Var,
}

impl KernelHeadParams {
    pub fn declare(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        spec: &KernelSpec,
        init: &mut Init,
    ) {
        let b = spec.params_per_kernel();
        // small kernels keep the initial mask logits near zero, off the sigmoid plateaus
        store.insert(join(prefix, "w"), init.fan_in(&[c, b], c, KERNEL_INIT_GAIN));
        store.insert(join(prefix, "b"), Tensor::zeros(&[b]));
    }

    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: p.var(prefix, "w")?,
            b: p.var(prefix, "b")?,
        })
    }
}

fn check_grid(g: &Graph, x: Var, w: Var, op: &'static str) -> Result<()> {
    let (s, ws) = (g.shape(x), g.shape(w));
    if s.len() != 3 || s[0] != s[1] || ws.first() != s.last() {
        return Err(shape_err(op, format!("grid {s:?} with weight {ws:?}")));
    }
    Ok(())
}

/// Two-layer per-cell MLP with sigmoid outputs.
pub fn category_head_forward(g: &mut Graph, x: Var, p: &CategoryHeadParams) -> Result<Var> {
    check_grid(g, x, p.w1, "category_head")?;
    let h = g.linear(x, p.w1, Some(p.b1))?;
    let h = g.gelu(h);
    let logits = g.linear(h, p.w2, Some(p.b2))?;
    Ok(g.sigmoid(logits))
}

/// Single per-cell linear layer producing `b` kernel weights.
pub fn kernel_head_forward(
    g: &mut Graph,
    x: Var,
    p: &KernelHeadParams,
    spec: &KernelSpec,
) -> Result<Var> {
    check_grid(g, x, p.w, "kernel_head")?;
    if g.shape(p.w)[1] != spec.params_per_kernel() {
        return Err(shape_err(
            "kernel_head",
            format!(
                "weight {:?} does not produce {} values",
                g.shape(p.w),
                spec.params_per_kernel()
            ),
        ));
    }
    g.linear(x, p.w, Some(p.b))
}
