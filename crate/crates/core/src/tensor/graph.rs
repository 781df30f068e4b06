use std::cell::{Ref, RefCell};
use std::fmt;

use super::array::NdArray;
use super::{conv, ops, pool};
use crate::error::{Error, Result};

/// Recorded operation. Node ids refer to earlier entries of the same graph,
/// so creation order is already a topological order.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Relu(usize),
    Sigmoid(usize),
    Softmax { x: usize, axis: usize },
    Reshape(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { a: usize, b: usize, axis: usize },
    Sum { x: usize, axes: Vec<usize> },
    Mean { x: usize, axes: Vec<usize> },
    Conv2d(conv::ConvRecord),
    MaxPool2 { x: usize, argmax: Vec<usize> },
    AvgPoolGlobal(usize),
    UpsampleNearest2(usize),
}

pub(crate) struct Node {
    pub(crate) value: NdArray,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    grad: Option<NdArray>,
}

/// Arena recording every tensor produced during one forward pass.
///
/// A graph is single-threaded (`!Sync` through `RefCell`); build one graph
/// per forward/backward step.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf tensor. With `requires_grad` its gradient is populated by
    /// [`Graph::backward`].
    pub fn leaf(&self, value: NdArray, requires_grad: bool) -> Tensor<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: NdArray) -> Tensor<'_> {
        self.leaf(value, false)
    }

    pub fn variable(&self, value: NdArray) -> Tensor<'_> {
        self.leaf(value, true)
    }

    /// Hash of every piecewise branch the recorded pass took: ReLU and `abs`
    /// signs, clamp regions and max-pool winners. Two passes with equal
    /// signatures evaluated the same smooth piece of the function.
    pub(crate) fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let nodes = self.nodes.borrow();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (id, node) in nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => {
                    id.hash(&mut h);
                    for v in nodes[*x].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    id.hash(&mut h);
                    for v in nodes[*x].value.data() {
                        ((*v < *lo) as u8 + 2 * (*v > *hi) as u8).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    id.hash(&mut h);
                    argmax.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub(crate) fn push(&self, value: NdArray, op: Op, requires_grad: bool) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Clear accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// (`+=`) across calls until [`Graph::zero_grad`].
    pub fn backward(&self, loss: Tensor<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.graph, self), "loss from another graph");
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if !root.value.is_scalar() {
                return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
            }
            let mut pending: Vec<Option<NdArray>> = vec![None; loss.id + 1];
            pending[loss.id] = Some(NdArray::ones(root.value.shape()));
            let mut leaf_grads = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(g) = pending[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_grads.push((id, g));
                    continue;
                }
                for (input, gi) in vjp(&nodes, id, &g) {
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    match &mut pending[input] {
                        Some(acc) => acc.add_assign(&gi),
                        slot => *slot = Some(gi),
                    }
                }
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

impl<'g> Tensor<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'g, NdArray> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_array(&self) -> NdArray {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<NdArray> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor<'g> {
        self.graph.constant(self.to_array())
    }

    pub fn backward(&self) -> Result<()> {
        self.graph.backward(*self)
    }
}

/// Vector-Jacobian product of node `id` given its output gradient.
fn vjp(nodes: &[Node], id: usize, g: &NdArray) -> Vec<(usize, NdArray)> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => {
            let (ga, gb) = ops::add_vjp(val(*a), val(*b), g);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Sub(a, b) => {
            let (ga, gb) = ops::add_vjp(val(*a), val(*b), g);
            vec![(*a, ga), (*b, gb.map(|v| -v))]
        }
        Op::Mul(a, b) => {
            let (ga, gb) = ops::mul_vjp(val(*a), val(*b), g);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Div(a, b) => {
            let (ga, gb) = ops::div_vjp(val(*a), val(*b), g);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Neg(x) => vec![(*x, g.map(|v| -v))],
        Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
        Op::AddScalar(x) => vec![(*x, g.clone())],
        Op::Exp(x) => vec![(*x, g.zip_map(&node.value, |gv, y| gv * y).unwrap())],
        Op::Log(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| gv / xv).unwrap())],
        Op::Abs(x) => vec![(
            *x,
            g.zip_map(val(*x), |gv, xv| {
                if xv > 0.0 {
                    gv
                } else if xv < 0.0 {
                    -gv
                } else {
                    0.0
                }
            })
            .unwrap(),
        )],
        Op::Square(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| 2.0 * xv * gv).unwrap())],
        Op::Sqrt(x) => vec![(*x, g.zip_map(&node.value, |gv, y| gv / (2.0 * y)).unwrap())],
        Op::Clamp { x, lo, hi } => vec![(
            *x,
            g.zip_map(val(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                .unwrap(),
        )],
        Op::Relu(x) => vec![(
            *x,
            g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }).unwrap(),
        )],
        Op::Sigmoid(x) => vec![(
            *x,
            g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s)).unwrap(),
        )],
        Op::Softmax { x, axis } => vec![(*x, ops::softmax_vjp(&node.value, g, *axis))],
        Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape()).unwrap())],
        Op::Narrow { x, axis, start } => vec![(*x, ops::narrow_vjp(val(*x).shape(), g, *axis, *start))],
        Op::Concat { a, b, axis } => {
            let (ga, gb) = ops::concat_vjp(val(*a).shape(), val(*b).shape(), g, *axis);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Sum { x, axes } => vec![(*x, ops::sum_vjp(val(*x).shape(), axes, g, 1.0))],
        Op::Mean { x, axes } => {
            let shape = val(*x).shape();
            let count: usize = axes.iter().map(|&a| shape[a]).product();
            vec![(*x, ops::sum_vjp(shape, axes, g, 1.0 / count as f64))]
        }
        Op::Conv2d(rec) => conv::conv2d_vjp(nodes, rec, g),
        Op::MaxPool2 { x, argmax } => vec![(*x, pool::maxpool2_vjp(val(*x).shape(), argmax, g))],
        Op::AvgPoolGlobal(x) => vec![(*x, pool::avgpool_global_vjp(val(*x).shape(), g))],
        Op::UpsampleNearest2(x) => vec![(*x, pool::upsample_nearest2_vjp(val(*x).shape(), g))],
    }
}
