//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every forward op appends one node holding its output value and whatever
//! it needs for the backward pass. Nodes are only ever appended, so the tape
//! is topologically ordered by construction and [`Tape::backward`] is a
//! single reverse sweep.

mod backward;
mod gradcheck;
mod ops;

pub use gradcheck::grad_check;
pub use ops::{sigmoid, BinaryOp, ElementwiseKind, Padding, UnaryOp, Window, WindowMode};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryOp,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Unfold {
        x: Var,
        axis: usize,
        plan: ops::WindowPlan,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        axis: usize,
        plan: ops::WindowPlan,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum {
        x: Var,
        map: Vec<usize>,
    },
    Mean {
        x: Var,
        map: Vec<usize>,
        count: usize,
    },
    Std {
        x: Var,
        map: Vec<usize>,
        count: usize,
        mean: Vec<f64>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation. One tape per forward/backward step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions)
            && !value.is_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.is_finite())
        {
            return Err(Error::Numeric {
                op: op_name(&op),
                detail: "non-finite output from finite inputs".into(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates d`loss`/d(node) back through the tape and adds the result
    /// into the gradient of every trainable leaf. Calling it twice without
    /// [`zero_grad`](Self::zero_grad) accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.len();
        if numel != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backward::propagate(&self.nodes, i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary { .. } => "elementwise",
        Op::Unary { .. } => "elementwise",
        Op::MatMul { .. } => "matmul",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Unfold { .. } => "unfold",
        Op::Conv1d { .. } => "conv1d",
        Op::MaxPool { .. } => "maxpool1d",
        Op::Sum { .. } | Op::Mean { .. } | Op::Std { .. } => "reduce",
        Op::Embedding { .. } => "embedding",
        Op::Permute { .. } => "permute",
        Op::Reshape { .. } => "reshape",
        Op::Concat { .. } => "concat",
    }
}
