use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
///
/// Given the forward inputs, the forward output and the gradient flowing into
/// the output, returns one gradient per input (`None` for inputs that are
/// treated as constants).
pub trait Backward: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AdaptiveAvgPool2d(Var),
    UpsampleNearest2d {
        x: Var,
        fh: usize,
        fw: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn Backward>,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

/// Append-only tape of recorded operations.
///
/// Nodes are stored in creation order, so every node's inputs precede it.
/// The tape is consumed by [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    /// Side of the non-smooth point for every element that passed through a
    /// kinked primitive (relu, clamps). Used by the gradient checker.
    pub(crate) kinks: Vec<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation whose gradient is supplied by `rule`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn Backward>) -> Var {
        let inputs = inputs.to_vec();
        self.push_op(output, &inputs.clone(), Op::Custom { inputs, rule })
    }

    /// Records which side of a non-smooth point each element falls on.
    pub fn record_kinks(&mut self, sides: impl IntoIterator<Item = bool>) {
        self.kinks.extend(sides);
    }

    pub(crate) fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            // Constant subgraphs keep no backward state.
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`, consuming the tape.
    ///
    /// Every leaf created with `requires_grad` receives a gradient; leaves the
    /// loss does not depend on receive zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Graph { nodes, .. } = self;
        let out = &nodes[loss.0];
        if !out.value.is_scalar() {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                out.value.shape()
            )));
        }
        if !out.requires_grad {
            return Err(Error::NoTape);
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            super::ops::backward_node(&nodes, id, &g, &mut grads);
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                if node.requires_grad && matches!(node.op, Op::Leaf) {
                    Some(
                        grads[id]
                            .take()
                            .unwrap_or_else(|| vec![0.0; node.value.numel()]),
                    )
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

/// Gradients of the trainable leaves of a consumed tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    contribution: Vec<f64>,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}
