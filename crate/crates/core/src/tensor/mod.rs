//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! Every operation is a method on [`Tensor`] that records itself on the
//! owning [`Graph`]. Nodes are appended in execution order, so the backward
//! sweep is a reverse walk over node ids. Leaf gradients accumulate until
//! [`Graph::zero_grad`].

mod array;
pub(crate) mod conv;
mod gradcheck;
mod graph;
mod ops;
mod pool;

pub use array::{broadcast_shape, NdArray};
pub use gradcheck::{gradcheck, gradcheck_many, gradcheck_piecewise};
pub use graph::{Graph, Tensor};
pub(crate) use ops::sigmoid;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Abs,
    Square,
}

/// Dispatch form of the elementwise ops. Binary kinds need `b`.
pub fn elementwise<'g>(op: Elementwise, a: Tensor<'g>, b: Option<Tensor<'g>>) -> Result<Tensor<'g>> {
    let rhs = || b.ok_or_else(|| Error::Input(format!("{op:?} needs a second operand")));
    match op {
        Elementwise::Add => a.add(rhs()?),
        Elementwise::Sub => a.sub(rhs()?),
        Elementwise::Mul => a.mul(rhs()?),
        Elementwise::Div => a.div(rhs()?),
        Elementwise::Exp => Ok(a.exp()),
        Elementwise::Log => a.log(),
        Elementwise::Abs => Ok(a.abs()),
        Elementwise::Square => Ok(a.square()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax { axis: usize },
}

pub fn activation(kind: Activation, x: Tensor<'_>) -> Result<Tensor<'_>> {
    match kind {
        Activation::Relu => Ok(x.relu()),
        Activation::Sigmoid => Ok(x.sigmoid()),
        Activation::Softmax { axis } => x.softmax(axis),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resize {
    MaxPool2,
    AvgPoolGlobal,
    UpsampleNearest2,
    ConcatChannels,
}

pub fn pool_and_resize<'g>(kind: Resize, x: Tensor<'g>, y: Option<Tensor<'g>>) -> Result<Tensor<'g>> {
    match kind {
        Resize::MaxPool2 => x.maxpool2(),
        Resize::AvgPoolGlobal => x.avgpool_global(),
        Resize::UpsampleNearest2 => x.upsample_nearest2(),
        Resize::ConcatChannels => {
            let y = y.ok_or_else(|| Error::Input("concat_channels needs a second tensor".into()))?;
            x.concat_channels(y)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Reduce over `axes` (keeping singleton extents) or over everything.
pub fn reduce<'g>(kind: Reduction, x: Tensor<'g>, axes: Option<&[usize]>) -> Result<Tensor<'g>> {
    match (kind, axes) {
        (Reduction::Sum, None) => Ok(x.sum_all()),
        (Reduction::Mean, None) => Ok(x.mean_all()),
        (Reduction::Sum, Some(ax)) => x.sum_axes(ax, true),
        (Reduction::Mean, Some(ax)) => x.mean_axes(ax, true),
    }
}
