//! Terse layer constructors used by the backbone definitions.

use crate::nn::{
    Activation, BatchNorm, Conv2d, DepthwiseConv2d, Graph, GraphBuilder, NodeId, Op, Pad4, Padding, Pool2d,
    PoolKind, SeparableConv2d, Shape,
};

pub(crate) use Padding::{Same, Valid};

fn name(n: &str) -> Option<String> {
    (!n.is_empty()).then(|| n.to_string())
}

/// Padding that makes a stride-2 `k`-kernel valid convolution line up with
/// `same` padding on an input of `size`.
pub(crate) fn correct_pad(h: usize, w: usize, k: usize) -> Pad4 {
    let adjust = |s: usize| 1 - s % 2;
    let c = k / 2;
    Pad4 {
        top: c - adjust(h),
        bottom: c,
        left: c - adjust(w),
        right: c,
    }
}

pub(crate) struct Net {
    pub g: GraphBuilder,
}

impl Net {
    pub fn new() -> Net {
        Net { g: GraphBuilder::new() }
    }

    pub fn input(&mut self, size: usize) -> NodeId {
        self.g.input([3, size, size])
    }

    pub fn shape(&self, x: NodeId) -> Shape {
        self.g.shape(x)
    }

    pub fn channels(&self, x: NodeId) -> usize {
        self.g.channels(x)
    }

    pub fn build(self, out: NodeId) -> Graph {
        self.g.build(out)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_full(
        &mut self,
        x: NodeId,
        n: &str,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
        bias: bool,
        activation: Activation,
    ) -> NodeId {
        let op = Op::Conv(Conv2d {
            filters,
            kernel,
            stride: (stride, stride),
            padding,
            bias,
            activation,
        });
        self.g.node(op, &[x], name(n))
    }

    pub fn conv(&mut self, x: NodeId, n: &str, filters: usize, k: usize, stride: usize, padding: Padding, bias: bool) -> NodeId {
        self.conv_full(x, n, filters, (k, k), stride, padding, bias, Activation::Linear)
    }

    pub fn depthwise(&mut self, x: NodeId, n: &str, k: usize, stride: usize, padding: Padding) -> NodeId {
        let op = Op::Depthwise(DepthwiseConv2d {
            kernel: (k, k),
            stride: (stride, stride),
            padding,
            bias: false,
            activation: Activation::Linear,
        });
        self.g.node(op, &[x], name(n))
    }

    pub fn separable(&mut self, x: NodeId, n: &str, filters: usize, k: usize, stride: usize, padding: Padding) -> NodeId {
        let op = Op::Separable(SeparableConv2d {
            filters,
            kernel: (k, k),
            stride: (stride, stride),
            padding,
            bias: false,
            activation: Activation::Linear,
        });
        self.g.node(op, &[x], name(n))
    }

    pub fn bn_with(&mut self, x: NodeId, n: &str, eps: f32, momentum: f32, scale: bool) -> NodeId {
        let op = Op::BatchNorm(BatchNorm {
            eps,
            momentum,
            center: true,
            scale,
        });
        self.g.node(op, &[x], name(n))
    }

    pub fn bn(&mut self, x: NodeId, n: &str, eps: f32) -> NodeId {
        self.bn_with(x, n, eps, 0.99, true)
    }

    pub fn act(&mut self, x: NodeId, n: &str, a: Activation) -> NodeId {
        self.g.node(Op::Act(a), &[x], name(n))
    }

    pub fn relu(&mut self, x: NodeId, n: &str) -> NodeId {
        self.act(x, n, Activation::Relu)
    }

    pub fn pad(&mut self, x: NodeId, n: &str, p: Pad4) -> NodeId {
        self.g.node(Op::ZeroPad(p), &[x], name(n))
    }

    pub fn crop(&mut self, x: NodeId, n: &str, p: Pad4) -> NodeId {
        self.g.node(Op::Crop(p), &[x], name(n))
    }

    pub fn pool(&mut self, x: NodeId, n: &str, kind: PoolKind, k: usize, stride: usize, padding: Padding) -> NodeId {
        let op = Op::Pool(Pool2d {
            kind,
            size: (k, k),
            stride: (stride, stride),
            padding,
        });
        self.g.node(op, &[x], name(n))
    }

    pub fn max_pool(&mut self, x: NodeId, n: &str, k: usize, stride: usize, padding: Padding) -> NodeId {
        self.pool(x, n, PoolKind::Max, k, stride, padding)
    }

    pub fn avg_pool(&mut self, x: NodeId, n: &str, k: usize, stride: usize, padding: Padding) -> NodeId {
        self.pool(x, n, PoolKind::Avg, k, stride, padding)
    }

    pub fn gap(&mut self, x: NodeId, n: &str) -> NodeId {
        self.g.node(Op::GlobalAvgPool, &[x], name(n))
    }

    pub fn reshape(&mut self, x: NodeId, n: &str) -> NodeId {
        self.g.node(Op::Reshape, &[x], name(n))
    }

    pub fn add(&mut self, xs: &[NodeId], n: &str) -> NodeId {
        self.g.node(Op::Add, xs, name(n))
    }

    pub fn multiply(&mut self, xs: &[NodeId], n: &str) -> NodeId {
        self.g.node(Op::Multiply, xs, name(n))
    }

    pub fn concat(&mut self, xs: &[NodeId], n: &str) -> NodeId {
        self.g.node(Op::Concat, xs, name(n))
    }

    pub fn op(&mut self, op: Op, xs: &[NodeId], n: &str) -> NodeId {
        self.g.node(op, xs, name(n))
    }
}
