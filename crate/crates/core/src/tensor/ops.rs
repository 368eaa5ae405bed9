//! Differentiable primitives: forward definitions on [`Graph`] and their
//! backward rules.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::{accumulate, Node, Op};
use super::kernels::{self, gemm, ConvGeom};
use super::{strides, Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2π)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Index maps from a broadcast output back into each operand.
struct Broadcast {
    shape: Vec<usize>,
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut shape = Vec::with_capacity(rank);
        for (&da, &db) in pa.iter().zip(&pb) {
            if da == db || db == 1 {
                shape.push(da);
            } else if da == 1 {
                shape.push(db);
            } else {
                return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}")));
            }
        }
        let map_a = if pa == shape {
            None
        } else {
            Some(index_map(&shape, &pa))
        };
        let map_b = if pb == shape {
            None
        } else {
            Some(index_map(&shape, &pb))
        };
        Ok(Self {
            shape,
            a: map_a,
            b: map_b,
        })
    }
}

fn index_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    let in_strides = strides(input);
    // Fast path: the operand is a suffix of the output repeated over leading dims.
    let lead = out.len() - input.iter().rev().take_while(|&&d| d != 1).count();
    if input[..lead].iter().all(|&d| d == 1) && out[lead..] == input[lead..] {
        let n: usize = input.iter().product();
        return (0..numel).map(|i| i % n).collect();
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..numel {
        let mut flat = 0;
        for d in 0..out.len() {
            if input[d] != 1 {
                flat += idx[d] * in_strides[d];
            }
        }
        map.push(flat);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn pick(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

fn reduce_to(
    map: &Option<Vec<usize>>,
    len: usize,
    grad: impl Iterator<Item = (usize, f64)>,
) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (i, g) in grad {
        out[pick(map, i)] += g;
    }
    out
}

/// Source flat index for every element of a permuted tensor.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = shape.iter().product();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut flat = 0usize;
    for _ in 0..numel {
        map.push(flat);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            flat += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 3 || w.len() != 4 {
        return Err(shape_err(
            "conv2d",
            format!("expected input C×H×W and weight Co×Ci×kh×kw, got {x:?} and {w:?}"),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if x[0] != w[1] {
        return Err(shape_err(
            "conv2d",
            format!("input channels of {x:?} do not match weight {w:?}"),
        ));
    }
    let (h, wd, kh, kw) = (x[1], x[2], w[2], w[3]);
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(shape_err(
            "conv2d",
            format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                wd + 2 * pad
            ),
        ));
    }
    Ok(ConvGeom {
        c_in: x[0],
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        h_out: (h + 2 * pad - kh) / stride + 1,
        w_out: (wd + 2 * pad - kw) / stride + 1,
    })
}

impl Graph {
    /// Matrix product of `m×k` and `k×p` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push_op(Tensor::new(&[m, n], c)?, &[a, b], Op::MatMul(a, b)))
    }

    /// Batched product of `B×m×k` and `B×k×p` operands.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", format!("{sa:?} × {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut c = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                (k, 1),
                &bv[i * k * n..],
                (n, 1),
                &mut c[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Ok(self.push_op(Tensor::new(&[bs, m, n], c)?, &[a, b], Op::BatchMatMul(a, b)))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::new("add", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let numel: usize = bc.shape.iter().product();
        let out = (0..numel)
            .map(|i| av[pick(&bc.a, i)] + bv[pick(&bc.b, i)])
            .collect();
        Ok(self.push_op(Tensor::new(&bc.shape, out)?, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Broadcast::new("mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let numel: usize = bc.shape.iter().product();
        let out = (0..numel)
            .map(|i| av[pick(&bc.a, i)] * bv[pick(&bc.b, i)])
            .collect();
        Ok(self.push_op(Tensor::new(&bc.shape, out)?, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        self.push_op(out, &[x], Op::Scale(x, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push_op(out, &[x], Op::Sigmoid(x))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push_op(out, &[x], Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let sides: Vec<bool> = self.value(x).data().iter().map(|&v| v > 0.0).collect();
        self.record_kinks(sides);
        self.push_op(out, &[x], Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push_op(Tensor::scalar(m), &[x], Op::Mean(x))
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let l = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(l) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = libm::exp(*v - max);
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push_op(out, &[x], Op::Softmax(x)))
    }

    /// Normalizes every position over the last axis, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?} needs gamma/beta of [{c}], got {:?}/{:?}",
                    t.shape(),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be > 0".into()));
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.numel() / c;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for (r, row) in t.data().chunks_exact(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = gv[j] * xh + bv[j];
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push_op(
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// 2-D convolution of a `C_in×H×W` input with zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let g = conv_geom(self.shape(x), self.shape(w), stride, pad)?;
        let c_out = self.shape(w)[0];
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err(
                    "conv2d",
                    format!(
                        "bias {:?} does not match {c_out} output channels",
                        self.shape(b)
                    ),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            c_out,
            &g,
        );
        let out = Tensor::new(&[c_out, g.h_out, g.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push_op(
            out,
            &inputs,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// Adaptive average pooling of a `C×H×W` map to `C×out_h×out_w`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(shape_err(
                "adaptive_avg_pool2d",
                format!("input {s:?} to {out_h}×{out_w}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1) = kernels::pool_window(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = kernels::pool_window(ox, w, out_w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += xv[(ch * h + y) * w + xx];
                        }
                    }
                    out[(ch * out_h + oy) * out_w + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let out = Tensor::new(&[c, out_h, out_w], out)?;
        Ok(self.push_op(out, &[x], Op::AdaptiveAvgPool2d(x)))
    }

    /// Nearest-neighbour upsampling of a `C×H×W` map by integer factors.
    pub fn upsample_nearest2d(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || fh == 0 || fw == 0 {
            return Err(shape_err(
                "upsample_nearest2d",
                format!("input {s:?} by {fh}×{fw}"),
            ));
        }
        if fh == 1 && fw == 1 {
            return Ok(x);
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * fh, w * fw);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let row = &xv[(ch * h + y / fh) * w..(ch * h + y / fh + 1) * w];
                for xx in 0..ow {
                    out.push(row[xx / fw]);
                }
            }
        }
        let out = Tensor::new(&[c, oh, ow], out)?;
        Ok(self.push_op(out, &[x], Op::UpsampleNearest2d { x, fh, fw }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *inputs
                    .first()
                    .ok_or_else(|| shape_err("concat", "no inputs"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} incompatible with {first:?}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push_op(
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(out, &[x], Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || core::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err(
                "permute",
                format!("{perm:?} is not a permutation of {s:?}"),
            ));
        }
        let map = permute_map(&s, perm);
        let xv = self.value(x).data();
        let out: Vec<f64> = map.iter().map(|&i| xv[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = Tensor::new(&shape, out)?;
        Ok(self.push_op(out, &[x], Op::Permute(x, perm.to_vec())))
    }

    /// Selects rows (entries of axis 0) in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(shape_err(
                "gather_rows",
                format!("rows {rows:?} out of range for {s:?}"),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&xv[r * inner..(r + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let out = Tensor::new(&shape, out)?;
        Ok(self.push_op(out, &[x], Op::GatherRows(x, rows.to_vec())))
    }

    /// `x·W + b` over the last axis of `x`, with `W: in×out` and `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || s.last() != Some(&ws[0]) {
            return Err(shape_err(
                "linear",
                format!("input {s:?} with weight {ws:?}"),
            ));
        }
        let rows = s.iter().product::<usize>() / ws[0];
        let flat = if s.len() == 2 {
            x
        } else {
            self.reshape(x, &[rows, ws[0]])?
        };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            if self.shape(b) != [ws[1]] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for weight {ws:?}", self.shape(b)),
                ));
            }
            y = self.add(y, b)?;
        }
        if s.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = s;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }
}

pub(crate) fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if rg(*a) {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, (n, 1), val(*b).data(), (1, n), &mut da, false);
                accumulate(nodes, grads, *a, da);
            }
            if rg(*b) {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, val(*a).data(), (1, k), g, (n, 1), &mut db, false);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::BatchMatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            if rg(*a) {
                let mut da = vec![0.0; bs * m * k];
                for i in 0..bs {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..],
                        (n, 1),
                        &val(*b).data()[i * k * n..],
                        (1, n),
                        &mut da[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                accumulate(nodes, grads, *a, da);
            }
            if rg(*b) {
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    gemm(
                        k,
                        m,
                        n,
                        &val(*a).data()[i * m * k..],
                        (1, k),
                        &g[i * m * n..],
                        (n, 1),
                        &mut db[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            let bc = Broadcast::new("add", val(*a).shape(), val(*b).shape())
                .expect("checked in forward");
            if rg(*a) {
                let da = reduce_to(&bc.a, val(*a).numel(), g.iter().copied().enumerate());
                accumulate(nodes, grads, *a, da);
            }
            if rg(*b) {
                let db = reduce_to(&bc.b, val(*b).numel(), g.iter().copied().enumerate());
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Mul(a, b) => {
            let bc = Broadcast::new("mul", val(*a).shape(), val(*b).shape())
                .expect("checked in forward");
            let (av, bv) = (val(*a).data(), val(*b).data());
            if rg(*a) {
                let da = reduce_to(
                    &bc.a,
                    av.len(),
                    g.iter()
                        .enumerate()
                        .map(|(i, &gi)| (i, gi * bv[pick(&bc.b, i)])),
                );
                accumulate(nodes, grads, *a, da);
            }
            if rg(*b) {
                let db = reduce_to(
                    &bc.b,
                    bv.len(),
                    g.iter()
                        .enumerate()
                        .map(|(i, &gi)| (i, gi * av[pick(&bc.a, i)])),
                );
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Scale(x, c) => {
            accumulate(nodes, grads, *x, g.iter().map(|v| v * c).collect());
        }
        Op::Sigmoid(x) => {
            let dx = g
                .iter()
                .zip(out.data())
                .map(|(gi, y)| gi * y * (1.0 - y))
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Gelu(x) => {
            let dx = g
                .iter()
                .zip(val(*x).data())
                .map(|(gi, &xi)| gi * gelu_grad(xi))
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Relu(x) => {
            let dx = g
                .iter()
                .zip(val(*x).data())
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, vec![g[0]; val(*x).numel()]);
        }
        Op::Mean(x) => {
            let n = val(*x).numel();
            accumulate(nodes, grads, *x, vec![g[0] / n as f64; n]);
        }
        Op::Softmax(x) => {
            let l = *out.shape().last().unwrap();
            let mut dx = vec![0.0; out.numel()];
            for ((d, y), gr) in dx
                .chunks_exact_mut(l)
                .zip(out.data().chunks_exact(l))
                .zip(g.chunks_exact(l))
            {
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..l {
                    d[j] = y[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = val(*gamma).numel();
            let gv = val(*gamma).data();
            if rg(*x) {
                let mut dx = vec![0.0; xhat.len()];
                for r in 0..rstd.len() {
                    let row = r * c..(r + 1) * c;
                    let (gr, xh) = (&g[row.clone()], &xhat[row.clone()]);
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rstd[r] * (gr[j] * gv[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
            if rg(*gamma) {
                let mut dg = vec![0.0; c];
                for (i, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                    dg[i % c] += gi * xh;
                }
                accumulate(nodes, grads, *gamma, dg);
            }
            if rg(*beta) {
                let mut db = vec![0.0; c];
                for (i, gi) in g.iter().enumerate() {
                    db[i % c] += gi;
                }
                accumulate(nodes, grads, *beta, db);
            }
        }
        Op::Conv2d {
            x,
            w,
            bias,
            stride,
            pad,
        } => {
            let geom = conv_geom(val(*x).shape(), val(*w).shape(), *stride, *pad)
                .expect("checked in forward");
            let c_out = val(*w).shape()[0];
            let (p, k) = (geom.out_pixels(), geom.patch_len());
            if let Some(b) = bias {
                if rg(*b) {
                    let db = g.chunks_exact(p).map(|row| row.iter().sum()).collect();
                    accumulate(nodes, grads, *b, db);
                }
            }
            if rg(*w) {
                let mut dw = vec![0.0; c_out * k];
                if geom.is_pointwise() {
                    gemm(
                        c_out,
                        p,
                        k,
                        g,
                        (p, 1),
                        val(*x).data(),
                        (1, p),
                        &mut dw,
                        false,
                    );
                } else {
                    let cols = kernels::im2col(val(*x).data(), &geom);
                    gemm(c_out, p, k, g, (p, 1), &cols, (1, p), &mut dw, false);
                }
                accumulate(nodes, grads, *w, dw);
            }
            if rg(*x) {
                let mut dcols = vec![0.0; k * p];
                gemm(
                    k,
                    c_out,
                    p,
                    val(*w).data(),
                    (1, k),
                    g,
                    (p, 1),
                    &mut dcols,
                    false,
                );
                let dx = if geom.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![0.0; val(*x).numel()];
                    kernels::col2im_add(&dcols, &geom, &mut dx);
                    dx
                };
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::AdaptiveAvgPool2d(x) => {
            let s = val(*x).shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let (oh, ow) = (out.shape()[1], out.shape()[2]);
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for oy in 0..oh {
                    let (y0, y1) = kernels::pool_window(oy, h, oh);
                    for ox in 0..ow {
                        let (x0, x1) = kernels::pool_window(ox, w, ow);
                        let share = g[(ch * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                dx[(ch * h + y) * w + xx] += share;
                            }
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::UpsampleNearest2d { x, fh, fw } => {
            let s = val(*x).shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let (oh, ow) = (h * fh, w * fw);
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        dx[(ch * h + y / fh) * w + xx / fw] += g[(ch * oh + y) * ow + xx];
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Concat { inputs, axis } => {
            let s = out.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let row = s[*axis] * inner;
            let mut offset = 0;
            for &v in inputs {
                let chunk = val(v).shape()[*axis] * inner;
                if rg(v) {
                    let mut dv = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        dv.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                    }
                    accumulate(nodes, grads, v, dv);
                }
                offset += chunk;
            }
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, g.to_vec());
        }
        Op::Permute(x, perm) => {
            let map = permute_map(val(*x).shape(), perm);
            let mut dx = vec![0.0; g.len()];
            for (gi, &src) in g.iter().zip(&map) {
                dx[src] = *gi;
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::GatherRows(x, rows) => {
            let inner = out.numel() / rows.len();
            let mut dx = vec![0.0; val(*x).numel()];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..inner {
                    dx[r * inner + j] += g[i * inner + j];
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Custom { inputs, rule } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
            let dins = rule.backward(&ins, out, g);
            for (&v, d) in inputs.iter().zip(dins) {
                if let Some(d) = d {
                    debug_assert_eq!(d.len(), val(v).numel());
                    accumulate(nodes, grads, v, d);
                }
            }
        }
    }
}
