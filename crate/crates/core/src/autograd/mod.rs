//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every op appends one node to a [`Tape`]. Nodes only reference earlier
//! nodes, so the tape order is a topological order and [`Tape::backward`]
//! visits each node exactly once by walking it in reverse. Gradients reaching
//! the same node from several consumers are summed.
//!
//! ```
//! use sebn_core::autograd::Tape;
//! use sebn_core::tensor::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

mod backward;
mod gradcheck;
pub mod kernels;
mod ops;

pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use ops::{BatchMoments, BnStats};

use crate::error::{contract_err, Result};
use crate::tensor::{numel, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<E> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    ScaleShift {
        x: Var,
        w: Var,
        b: Var,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin {
        x: Var,
        min: E,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<E>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        inv_std: Vec<E>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    TimeWeightedSum {
        h: Var,
        alpha: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
    AamMargin {
        cos: Var,
        labels: Vec<usize>,
        margin: E,
    },
}

#[derive(Debug)]
pub(crate) struct Node<E> {
    pub shape: Vec<usize>,
    pub value: Vec<E>,
    pub requires_grad: bool,
    pub op: Op<E>,
    /// Accumulated gradient, kept for leaves that require it.
    pub grad: Option<Vec<E>>,
}

/// Records ops and runs reverse-mode accumulation.
#[derive(Debug, Default)]
pub struct Tape<E> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. `requires_grad` makes it a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), requires_grad, Op::Leaf)
    }

    /// Registers a tensor using its own `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor<E>) -> Var {
        self.leaf(t.clone(), t.requires_grad())
    }

    /// Registers a non-differentiable tensor.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<E> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> E {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<E>, requires_grad: bool, op: Op<E>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`, adding into every differentiable leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<E>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            backward::propagate(self, i, &g, &mut adj);
        }
        Ok(())
    }
}

/// Adds `delta` into the adjoint slot of `v` when it participates in differentiation.
pub(crate) fn accumulate<E: Element>(tape: &Tape<E>, adj: &mut [Option<Vec<E>>], v: Var, delta: Vec<E>) {
    if !tape.nodes[v.0].requires_grad {
        return;
    }
    match &mut adj[v.0] {
        Some(buf) => buf.iter_mut().zip(&delta).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(delta),
    }
}
