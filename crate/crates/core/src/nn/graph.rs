use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Per-sample activation shape: channels, height, width.
pub type Shape = [usize; 3];

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Relu6,
    Sigmoid,
    Swish,
    HardSigmoid,
    HardSwish,
    Tanh,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub bias: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthwiseConv2d {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub bias: bool,
    pub activation: Activation,
}

/// Depthwise then pointwise convolution, one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparableConv2d {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub bias: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub eps: f32,
    pub momentum: f32,
    pub center: bool,
    pub scale: bool,
}

impl Default for BatchNorm {
    fn default() -> Self {
        BatchNorm {
            eps: 1e-3,
            momentum: 0.99,
            center: true,
            scale: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub size: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub units: usize,
    pub bias: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pad4 {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Pad4 {
    pub fn uniform(p: usize) -> Self {
        Pad4 {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input,
    /// `x * scale + offset`.
    Rescale { scale: f32, offset: f32 },
    /// `(x - mean) / sqrt(variance)` with stored per-channel statistics.
    Normalize,
    ZeroPad(Pad4),
    Crop(Pad4),
    Conv(Conv2d),
    Depthwise(DepthwiseConv2d),
    Separable(SeparableConv2d),
    BatchNorm(BatchNorm),
    Act(Activation),
    AddScalar(f32),
    MulScalar(f32),
    Pool(Pool2d),
    GlobalAvgPool,
    Dense(Dense),
    /// `per_sample` drops whole samples (stochastic depth), otherwise elements.
    Dropout { rate: f32, per_sample: bool },
    Reshape,
    Add,
    /// Elementwise product; an input with 1x1 spatial extent broadcasts.
    Multiply,
    Concat,
    /// `a + b * scale`.
    ScaledSum { scale: f32 },
}

impl Op {
    /// Layer class name, as a deep-learning framework would report it.
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input => "InputLayer",
            Op::Rescale { .. } => "Rescaling",
            Op::Normalize => "Normalization",
            Op::ZeroPad(_) => "ZeroPadding2D",
            Op::Crop(_) => "Cropping2D",
            Op::Conv(_) => "Conv2D",
            Op::Depthwise(_) => "DepthwiseConv2D",
            Op::Separable(_) => "SeparableConv2D",
            Op::BatchNorm(_) => "BatchNormalization",
            Op::Act(_) => "Activation",
            Op::AddScalar(_) | Op::MulScalar(_) => "TFOpLambda",
            Op::Pool(p) => match p.kind {
                PoolKind::Max => "MaxPooling2D",
                PoolKind::Avg => "AveragePooling2D",
            },
            Op::GlobalAvgPool => "GlobalAveragePooling2D",
            Op::Dense(_) => "Dense",
            Op::Dropout { .. } => "Dropout",
            Op::Reshape => "Reshape",
            Op::Add => "Add",
            Op::Multiply => "Multiply",
            Op::Concat => "Concatenate",
            Op::ScaledSum { .. } => "Lambda",
        }
    }

    fn auto_name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Rescale { .. } => "rescaling",
            Op::Normalize => "normalization",
            Op::ZeroPad(_) => "zero_padding2d",
            Op::Crop(_) => "cropping2d",
            Op::Conv(_) => "conv2d",
            Op::Depthwise(_) => "depthwise_conv2d",
            Op::Separable(_) => "separable_conv2d",
            Op::BatchNorm(_) => "batch_normalization",
            Op::Act(_) => "activation",
            Op::AddScalar(_) => "tf.__operators__.add",
            Op::MulScalar(_) => "tf.math.multiply",
            Op::Pool(p) => match p.kind {
                PoolKind::Max => "max_pooling2d",
                PoolKind::Avg => "average_pooling2d",
            },
            Op::GlobalAvgPool => "global_average_pooling2d",
            Op::Dense(_) => "dense",
            Op::Dropout { .. } => "dropout",
            Op::Reshape => "reshape",
            Op::Add => "add",
            Op::Multiply => "multiply",
            Op::Concat => "concatenate",
            Op::ScaledSum { .. } => "lambda",
        }
    }

    /// True for layers that own a spatial convolution kernel.
    pub fn is_convolution(&self) -> bool {
        matches!(self, Op::Conv(_) | Op::Depthwise(_) | Op::Separable(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub dims: Vec<usize>,
    /// False for statistics that are stored but never touched by the optimizer.
    pub trainable: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
}

pub(crate) fn conv_out(size: usize, k: usize, s: usize, padding: Padding) -> usize {
    match padding {
        Padding::Valid => {
            assert!(size >= k, "kernel {k} larger than input {size}");
            (size - k) / s + 1
        }
        Padding::Same => size.div_ceil(s),
    }
}

/// Leading (top or left) padding for `same` convolution, matching the usual
/// framework convention of putting the extra row/column at the end.
pub(crate) fn same_pad_before(size: usize, k: usize, s: usize) -> usize {
    let out = size.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(size);
    total / 2
}

fn infer_shape(op: &Op, ins: &[Shape]) -> Shape {
    let first = ins.first().copied().unwrap_or([0, 0, 0]);
    match op {
        Op::Input => panic!("input shape must be given explicitly"),
        Op::Rescale { .. }
        | Op::Normalize
        | Op::BatchNorm(_)
        | Op::Act(_)
        | Op::AddScalar(_)
        | Op::MulScalar(_)
        | Op::Dropout { .. }
        | Op::Reshape => first,
        Op::ZeroPad(p) => [first[0], first[1] + p.top + p.bottom, first[2] + p.left + p.right],
        Op::Crop(p) => [first[0], first[1] - p.top - p.bottom, first[2] - p.left - p.right],
        Op::Conv(c) => [
            c.filters,
            conv_out(first[1], c.kernel.0, c.stride.0, c.padding),
            conv_out(first[2], c.kernel.1, c.stride.1, c.padding),
        ],
        Op::Depthwise(c) => [
            first[0],
            conv_out(first[1], c.kernel.0, c.stride.0, c.padding),
            conv_out(first[2], c.kernel.1, c.stride.1, c.padding),
        ],
        Op::Separable(c) => [
            c.filters,
            conv_out(first[1], c.kernel.0, c.stride.0, c.padding),
            conv_out(first[2], c.kernel.1, c.stride.1, c.padding),
        ],
        Op::Pool(p) => [
            first[0],
            conv_out(first[1], p.size.0, p.stride.0, p.padding),
            conv_out(first[2], p.size.1, p.stride.1, p.padding),
        ],
        Op::GlobalAvgPool => [first[0], 1, 1],
        Op::Dense(d) => [d.units, 1, 1],
        Op::Add | Op::ScaledSum { .. } => {
            for s in ins {
                assert_eq!(*s, first, "elementwise inputs disagree: {ins:?}");
            }
            first
        }
        Op::Multiply => {
            let mut out = first;
            for s in &ins[1..] {
                assert_eq!(s[0], out[0], "multiply channel mismatch: {ins:?}");
                if out[1] * out[2] == 1 {
                    out = *s;
                } else {
                    assert!(
                        s[1] * s[2] == 1 || (s[1] == out[1] && s[2] == out[2]),
                        "multiply spatial mismatch: {ins:?}"
                    );
                }
            }
            out
        }
        Op::Concat => {
            let c = ins.iter().map(|s| s[0]).sum();
            for s in ins {
                assert_eq!((s[1], s[2]), (first[1], first[2]), "concat spatial mismatch: {ins:?}");
            }
            [c, first[1], first[2]]
        }
    }
}

fn param_specs(op: &Op, ins: &[Shape]) -> Vec<ParamSpec> {
    let c_in = ins.first().map(|s| s[0]).unwrap_or(0);
    let p = |name, dims: Vec<usize>, trainable| ParamSpec {
        name,
        dims,
        trainable,
    };
    let mut out = Vec::new();
    match op {
        Op::Conv(c) => {
            out.push(p("kernel", vec![c.filters, c_in, c.kernel.0, c.kernel.1], true));
            if c.bias {
                out.push(p("bias", vec![c.filters], true));
            }
        }
        Op::Depthwise(c) => {
            out.push(p("depthwise_kernel", vec![c_in, 1, c.kernel.0, c.kernel.1], true));
            if c.bias {
                out.push(p("bias", vec![c_in], true));
            }
        }
        Op::Separable(c) => {
            out.push(p("depthwise_kernel", vec![c_in, 1, c.kernel.0, c.kernel.1], true));
            out.push(p("pointwise_kernel", vec![c.filters, c_in, 1, 1], true));
            if c.bias {
                out.push(p("bias", vec![c.filters], true));
            }
        }
        Op::BatchNorm(b) => {
            if b.scale {
                out.push(p("gamma", vec![c_in], true));
            }
            if b.center {
                out.push(p("beta", vec![c_in], true));
            }
            out.push(p("moving_mean", vec![c_in], false));
            out.push(p("moving_variance", vec![c_in], false));
        }
        Op::Dense(d) => {
            out.push(p("kernel", vec![d.units, c_in], true));
            if d.bias {
                out.push(p("bias", vec![d.units], true));
            }
        }
        Op::Normalize => {
            out.push(p("mean", vec![c_in], false));
            out.push(p("variance", vec![c_in], false));
            out.push(p("count", vec![1], false));
        }
        _ => {}
    }
    out
}

/// A static computation graph whose node order is the canonical layer list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub output: NodeId,
    pub params: Vec<Vec<ParamSpec>>,
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_shape(&self) -> Shape {
        self.nodes[0].shape
    }

    pub fn output_shape(&self) -> Shape {
        self.nodes[self.output].shape
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn param_count(&self, node: NodeId) -> usize {
        self.params[node].iter().map(ParamSpec::len).sum()
    }

    pub fn total_params(&self) -> usize {
        (0..self.nodes.len()).map(|i| self.param_count(i)).sum()
    }

    pub fn input_shapes(&self, node: NodeId) -> Vec<Shape> {
        self.nodes[node].inputs.iter().map(|&i| self.nodes[i].shape).collect()
    }

    /// Consumers of each node.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &j in &n.inputs {
                out[j].push(i);
            }
        }
        out
    }

    /// Appends a node after the current output and makes it the new output.
    pub fn push(&mut self, name: impl Into<String>, op: Op, inputs: &[NodeId]) -> NodeId {
        let ins: Vec<Shape> = inputs.iter().map(|&i| self.nodes[i].shape).collect();
        let shape = infer_shape(&op, &ins);
        self.params.push(param_specs(&op, &ins));
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs: inputs.to_vec(),
            shape,
        });
        self.output = self.nodes.len() - 1;
        self.output
    }

    /// Keeps the first `len` nodes; `output` must lie inside the kept prefix.
    pub fn truncate(&mut self, len: usize, output: NodeId) {
        assert!(output < len);
        self.nodes.truncate(len);
        self.params.truncate(len);
        self.output = output;
    }
}

/// Builds a graph layer by layer in creation order, then lays it out in the
/// canonical order: deepest-from-output first, ties broken by depth-first
/// discovery order from the output. That reproduces the layer lists the
/// published reference implementations expose, which is what unfreeze depths
/// are counted against.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    counters: HashMap<&'static str, usize>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, shape: Shape) -> NodeId {
        let name = self.fresh_name("input");
        self.nodes.push(Node {
            name,
            op: Op::Input,
            inputs: Vec::new(),
            shape,
        });
        self.nodes.len() - 1
    }

    fn fresh_name(&mut self, base: &'static str) -> String {
        let n = self.counters.entry(base).or_insert(0);
        let name = if *n == 0 && base != "input" {
            base.to_string()
        } else {
            format!("{base}_{}", *n + usize::from(base == "input"))
        };
        *n += 1;
        name
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id].shape
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].shape[0]
    }

    pub fn node(&mut self, op: Op, inputs: &[NodeId], name: Option<String>) -> NodeId {
        let ins: Vec<Shape> = inputs.iter().map(|&i| self.nodes[i].shape).collect();
        let shape = infer_shape(&op, &ins);
        let name = match name {
            Some(n) => n,
            None => self.fresh_name(op.auto_name()),
        };
        self.nodes.push(Node {
            name,
            op,
            inputs: inputs.to_vec(),
            shape,
        });
        self.nodes.len() - 1
    }

    pub fn build(self, output: NodeId) -> Graph {
        let n = self.nodes.len();
        // Discovery order from the output, inputs visited left to right.
        let mut discovery = vec![usize::MAX; n];
        let mut next = 0;
        let mut stack = vec![output];
        while let Some(id) = stack.pop() {
            if discovery[id] != usize::MAX {
                continue;
            }
            discovery[id] = next;
            next += 1;
            for &i in self.nodes[id].inputs.iter().rev() {
                if discovery[i] == usize::MAX {
                    stack.push(i);
                }
            }
        }
        // Longest distance to the output; creation order is topological.
        let mut depth = vec![0usize; n];
        for id in (0..n).rev() {
            if discovery[id] == usize::MAX {
                continue;
            }
            for &i in &self.nodes[id].inputs {
                depth[i] = depth[i].max(depth[id] + 1);
            }
        }
        let mut order: Vec<NodeId> = (0..n).filter(|&i| discovery[i] != usize::MAX).collect();
        order.sort_by(|&a, &b| depth[b].cmp(&depth[a]).then(discovery[a].cmp(&discovery[b])));
        let mut remap = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let mut graph = Graph {
            nodes: Vec::with_capacity(order.len()),
            output: remap[output],
            params: Vec::with_capacity(order.len()),
        };
        for &old in &order {
            let mut node = self.nodes[old].clone();
            node.inputs = node.inputs.iter().map(|&i| remap[i]).collect();
            debug_assert!(node.inputs.iter().all(|&i| i < graph.nodes.len()));
            let ins: Vec<Shape> = node.inputs.iter().map(|&i| graph.nodes[i].shape).collect();
            graph.params.push(param_specs(&node.op, &ins));
            graph.nodes.push(node);
        }
        graph
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_matches_ceil_division() {
        assert_eq!(conv_out(224, 3, 2, Padding::Same), 112);
        assert_eq!(conv_out(7, 3, 2, Padding::Same), 4);
        assert_eq!(same_pad_before(224, 3, 2), 0);
        assert_eq!(same_pad_before(7, 3, 1), 1);
        assert_eq!(conv_out(230, 7, 2, Padding::Valid), 112);
    }

    #[test]
    fn ordering_places_branch_heads_by_depth() {
        // a -> b -> c -> add ; a -> s -> add. s is shallower than b.
        let mut g = GraphBuilder::new();
        let a = g.input([1, 4, 4]);
        let s = g.node(Op::Act(Activation::Relu), &[a], Some("s".into()));
        let b = g.node(Op::Act(Activation::Relu), &[a], Some("b".into()));
        let c = g.node(Op::Act(Activation::Relu), &[b], Some("c".into()));
        let add = g.node(Op::Add, &[s, c], Some("add".into()));
        let graph = g.build(add);
        let names: Vec<_> = graph.nodes.iter().map(|n| n.name.as_str()).collect();
        assert_eq!(names, ["input_1", "b", "s", "c", "add"]);
        assert_eq!(graph.output, 4);
    }

    #[test]
    fn unreachable_nodes_are_dropped() {
        let mut g = GraphBuilder::new();
        let a = g.input([1, 2, 2]);
        let _dead = g.node(Op::Act(Activation::Relu), &[a], None);
        let out = g.node(Op::GlobalAvgPool, &[a], None);
        let graph = g.build(out);
        assert_eq!(graph.len(), 2);
        assert_eq!(graph.output_shape(), [1, 1, 1]);
    }
}
