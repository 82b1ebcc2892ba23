//! A small static-graph CNN engine: NCHW tensors, the layer set used by the
//! backbone registry, reverse-mode gradients and Adam.

pub mod exec;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod tensor;
pub mod weights;

#[cfg(test)]
mod gradcheck;

pub use exec::{BackwardOptions, ForwardOptions, Gradients, NodeParams, Trace};
pub use graph::{
    Activation, BatchNorm, Conv2d, Dense, DepthwiseConv2d, Graph, GraphBuilder, Node, NodeId, Op, Pad4,
    Padding, ParamSpec, Pool2d, PoolKind, SeparableConv2d, Shape,
};
pub use model::{Adam, Model};
pub use tensor::Tensor;
