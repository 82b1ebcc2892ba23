//! Graph executor: forward pass with a retained trace and reverse-mode
//! gradients for parameters and (optionally) one captured activation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{
    same_pad_before, Activation, Graph, NodeId, Op, Padding, PoolKind, Shape,
};
use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;

/// Parameter buffers of one node, in the order of its `ParamSpec`s.
pub type NodeParams = Vec<Vec<f32>>;

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    /// Training mode: dropout is active and trainable batch-norm layers use
    /// batch statistics. Frozen batch-norm layers always use moving statistics.
    pub train: bool,
    pub trainable: &'a [bool],
    pub seed: u64,
    /// Retain every activation (needed for backward); otherwise intermediates
    /// are released as soon as their last consumer has run.
    pub keep_all: bool,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Pre-activation output of a layer with a fused activation.
    Pre(Tensor),
    Bn { mean: Vec<f32>, inv_std: Vec<f32> },
    Mask(Vec<f32>),
    Separable { mid: Tensor, pre: Option<Tensor> },
}

/// Activations retained by a forward pass.
#[derive(Debug)]
pub struct Trace {
    pub acts: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
    /// Batch mean and unbiased variance for every batch-norm layer that ran
    /// on batch statistics; the caller folds them into the moving averages.
    pub bn_stats: Vec<(NodeId, Vec<f32>, Vec<f32>)>,
}

impl Trace {
    pub fn output(&self, graph: &Graph) -> &Tensor {
        self.acts[graph.output].as_ref().expect("output retained")
    }

    pub fn take_output(mut self, graph: &Graph) -> Tensor {
        self.acts[graph.output].take().expect("output retained")
    }

    /// Pre-activation values of a node with a fused activation, if recorded.
    pub fn pre_activation(&self, node: NodeId) -> Option<&Tensor> {
        match &self.aux[node] {
            Aux::Pre(t) => Some(t),
            Aux::Separable { pre: Some(t), .. } => Some(t),
            _ => None,
        }
    }
}

fn conv_geom(in_shape: Shape, out_shape: Shape, k: (usize, usize), s: (usize, usize), padding: Padding) -> ConvGeom {
    let (pt, pl) = match padding {
        Padding::Valid => (0, 0),
        Padding::Same => (
            same_pad_before(in_shape[1], k.0, s.0),
            same_pad_before(in_shape[2], k.1, s.1),
        ),
    };
    ConvGeom {
        c: in_shape[0],
        h: in_shape[1],
        w: in_shape[2],
        kh: k.0,
        kw: k.1,
        sh: s.0,
        sw: s.1,
        pt,
        pl,
        ho: out_shape[1],
        wo: out_shape[2],
    }
}

fn batch_dims(n: usize, s: Shape) -> [usize; 4] {
    [n, s[0], s[1], s[2]]
}

/// Dense convolution of a batch: `out = kernel * col(x) + bias`.
fn conv_forward(x: &Tensor, kernel: &[f32], bias: Option<&[f32]>, g: &ConvGeom, filters: usize) -> Tensor {
    let n = x.batch();
    let (k, p) = (g.k(), g.p());
    let mut out = Tensor::zeros([n, filters, g.ho, g.wo]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for b in 0..n {
        let xs = x.sample(b);
        let cols: &[f32] = if g.is_pointwise() {
            xs
        } else {
            kernels::im2col(xs, g, &mut col);
            &col
        };
        let dst = out.sample_mut(b);
        if let Some(bias) = bias {
            for (f, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias[f]);
            }
        }
        kernels::gemm(filters, k, p, kernel, (k, 1), cols, (p, 1), if bias.is_some() { 1.0 } else { 0.0 }, dst);
    }
    out
}

/// Returns (kernel grad, bias grad, input grad) for a dense convolution.
fn conv_backward(
    x: &Tensor,
    kernel: &[f32],
    dy: &Tensor,
    g: &ConvGeom,
    filters: usize,
    want_params: bool,
    want_input: bool,
) -> (Vec<f32>, Vec<f32>, Option<Tensor>) {
    let n = x.batch();
    let (k, p) = (g.k(), g.p());
    let mut dk = if want_params { vec![0.0; filters * k] } else { Vec::new() };
    let mut db = if want_params { vec![0.0; filters] } else { Vec::new() };
    let mut dx = want_input.then(|| Tensor::zeros(x.dims));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut dcol = if want_input && !g.is_pointwise() { vec![0.0; k * p] } else { Vec::new() };
    for b in 0..n {
        let dys = dy.sample(b);
        if want_params {
            let xs = x.sample(b);
            let cols: &[f32] = if g.is_pointwise() {
                xs
            } else {
                kernels::im2col(xs, g, &mut col);
                &col
            };
            // dk[f, k] += dy[f, p] * col[k, p]^T
            kernels::gemm(filters, p, k, dys, (p, 1), cols, (1, p), 1.0, &mut dk);
            for (f, chunk) in dys.chunks(p).enumerate() {
                db[f] += chunk.iter().sum::<f32>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            if g.is_pointwise() {
                // dx[k, p] = kernel[f, k]^T * dy[f, p]
                kernels::gemm(k, filters, p, kernel, (1, k), dys, (p, 1), 0.0, dx.sample_mut(b));
            } else {
                kernels::gemm(k, filters, p, kernel, (1, k), dys, (p, 1), 0.0, &mut dcol);
                kernels::col2im(&dcol, g, dx.sample_mut(b));
            }
        }
    }
    (dk, db, dx)
}

fn depthwise_batch(x: &Tensor, kernel: &[f32], g: &ConvGeom) -> Tensor {
    let n = x.batch();
    let mut out = Tensor::zeros([n, g.c, g.ho, g.wo]);
    for b in 0..n {
        kernels::depthwise_forward(x.sample(b), kernel, g, out.sample_mut(b));
    }
    out
}

fn add_channel_bias(t: &mut Tensor, bias: &[f32]) {
    let plane = t.plane();
    let c = t.channels();
    for s in t.data.chunks_mut(c * plane) {
        for (ch, chunk) in s.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v += bias[ch];
            }
        }
    }
}

fn channel_sums(t: &Tensor) -> Vec<f32> {
    let plane = t.plane();
    let c = t.channels();
    let mut out = vec![0.0; c];
    for s in t.data.chunks(c * plane) {
        for (ch, chunk) in s.chunks(plane).enumerate() {
            out[ch] += chunk.iter().sum::<f32>();
        }
    }
    out
}

fn apply_activation(a: Activation, t: Tensor, record: bool) -> (Tensor, Aux) {
    if a == Activation::Linear {
        return (t, Aux::None);
    }
    let pre = record.then(|| t.clone());
    let mut out = t;
    let (c, plane) = (out.channels(), out.plane());
    kernels::activate(a, &mut out.data, c, plane);
    (out, pre.map(Aux::Pre).unwrap_or(Aux::None))
}

fn pool_forward(x: &Tensor, kind: PoolKind, g: &ConvGeom) -> Tensor {
    let n = x.batch();
    let mut out = Tensor::zeros([n, g.c, g.ho, g.wo]);
    for b in 0..n {
        let xs = x.sample(b);
        let os = out.sample_mut(b);
        for c in 0..g.c {
            let plane = &xs[c * g.h * g.w..(c + 1) * g.h * g.w];
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let mut acc = match kind {
                        PoolKind::Max => f32::NEG_INFINITY,
                        PoolKind::Avg => 0.0,
                    };
                    let mut count = 0usize;
                    for i in 0..g.kh {
                        let ih = (oh * g.sh + i) as isize - g.pt as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for j in 0..g.kw {
                            let iw = (ow * g.sw + j) as isize - g.pl as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            let v = plane[ih as usize * g.w + iw as usize];
                            match kind {
                                PoolKind::Max => acc = acc.max(v),
                                PoolKind::Avg => acc += v,
                            }
                            count += 1;
                        }
                    }
                    os[(c * g.ho + oh) * g.wo + ow] = match kind {
                        PoolKind::Max => acc,
                        PoolKind::Avg => acc / count.max(1) as f32,
                    };
                }
            }
        }
    }
    out
}

fn pool_backward(x: &Tensor, y: &Tensor, dy: &Tensor, kind: PoolKind, g: &ConvGeom) -> Tensor {
    let mut dx = Tensor::zeros(x.dims);
    for b in 0..x.batch() {
        let xs = x.sample(b);
        let ys = y.sample(b);
        let dys = dy.sample(b);
        let dxs = dx.sample_mut(b);
        for c in 0..g.c {
            let base = c * g.h * g.w;
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let o = (c * g.ho + oh) * g.wo + ow;
                    let d = dys[o];
                    if d == 0.0 {
                        continue;
                    }
                    let mut cells = Vec::with_capacity(g.kh * g.kw);
                    for i in 0..g.kh {
                        let ih = (oh * g.sh + i) as isize - g.pt as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for j in 0..g.kw {
                            let iw = (ow * g.sw + j) as isize - g.pl as isize;
                            if iw >= 0 && iw < g.w as isize {
                                cells.push(base + ih as usize * g.w + iw as usize);
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            if let Some(&idx) = cells.iter().find(|&&idx| xs[idx] == ys[o]) {
                                dxs[idx] += d;
                            }
                        }
                        PoolKind::Avg => {
                            let share = d / cells.len().max(1) as f32;
                            for idx in cells {
                                dxs[idx] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn pad_copy(x: &Tensor, out_shape: Shape, top: usize, left: usize) -> Tensor {
    let n = x.batch();
    let mut out = Tensor::zeros(batch_dims(n, out_shape));
    let (h, w) = (x.height(), x.width());
    for b in 0..n {
        for c in 0..x.channels() {
            for r in 0..h {
                let src = &x.sample(b)[(c * h + r) * w..(c * h + r + 1) * w];
                let start = (c * out_shape[1] + r + top) * out_shape[2] + left;
                out.sample_mut(b)[start..start + w].copy_from_slice(src);
            }
        }
    }
    out
}

fn crop_copy(x: &Tensor, out_shape: Shape, top: usize, left: usize) -> Tensor {
    let n = x.batch();
    let mut out = Tensor::zeros(batch_dims(n, out_shape));
    let (h, w) = (x.height(), x.width());
    for b in 0..n {
        for c in 0..out_shape[0] {
            for r in 0..out_shape[1] {
                let start = (c * h + r + top) * w + left;
                let src = &x.sample(b)[start..start + out_shape[2]];
                let dst = (c * out_shape[1] + r) * out_shape[2];
                out.sample_mut(b)[dst..dst + out_shape[2]].copy_from_slice(src);
            }
        }
    }
    out
}

/// Broadcast-aware elementwise product of two batch tensors.
fn multiply(a: &Tensor, b: &Tensor) -> Tensor {
    let (big, small) = if a.plane() >= b.plane() { (a, b) } else { (b, a) };
    let mut out = big.clone();
    if small.plane() == big.plane() {
        for (o, s) in out.data.iter_mut().zip(&small.data) {
            *o *= *s;
        }
    } else {
        let plane = big.plane();
        for (i, chunk) in out.data.chunks_mut(plane).enumerate() {
            let s = small.data[i];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
    }
    out
}

/// Gradient for `target` in `target * other`, reduced to `target`'s shape.
fn multiply_grad(target: &Tensor, other: &Tensor, dy: &Tensor) -> Tensor {
    let plane = dy.plane();
    let mut g = Tensor::zeros(target.dims);
    if target.plane() == plane {
        if other.plane() == plane {
            for ((gv, d), o) in g.data.iter_mut().zip(&dy.data).zip(&other.data) {
                *gv = d * o;
            }
        } else {
            for (i, (gc, dc)) in g.data.chunks_mut(plane).zip(dy.data.chunks(plane)).enumerate() {
                let o = other.data[i];
                for (gv, d) in gc.iter_mut().zip(dc) {
                    *gv = d * o;
                }
            }
        }
    } else {
        for (i, (dc, oc)) in dy.data.chunks(plane).zip(other.data.chunks(plane)).enumerate() {
            g.data[i] = dc.iter().zip(oc).map(|(d, o)| d * o).sum();
        }
    }
    g
}

fn mix_seed(seed: u64, node: usize) -> u64 {
    let mut z = seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn forward(graph: &Graph, params: &[NodeParams], input: Tensor, opts: &ForwardOptions) -> Trace {
    let n_nodes = graph.len();
    let n = input.batch();
    assert_eq!(
        [input.dims[1], input.dims[2], input.dims[3]],
        graph.input_shape(),
        "input does not match graph input shape"
    );
    let mut remaining: Vec<usize> = vec![0; n_nodes];
    for node in &graph.nodes {
        for &i in &node.inputs {
            remaining[i] += 1;
        }
    }
    let mut acts: Vec<Option<Tensor>> = vec![None; n_nodes];
    let mut aux = vec![Aux::None; n_nodes];
    let mut bn_stats = Vec::new();
    acts[0] = Some(input);
    for id in 1..n_nodes {
        let node = &graph.nodes[id];
        let ins: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|&i| acts[i].as_ref().expect("input activation released early"))
            .collect();
        let p = &params[id];
        let in_shape = graph.nodes[node.inputs[0]].shape;
        let out_shape = node.shape;
        let record = opts.keep_all;
        let (out, a) = match &node.op {
            Op::Input => unreachable!("only node 0 is an input"),
            Op::Rescale { scale, offset } => {
                let mut t = ins[0].clone();
                t.data.iter_mut().for_each(|v| *v = *v * scale + offset);
                (t, Aux::None)
            }
            Op::Normalize => {
                let mut t = ins[0].clone();
                let plane = t.plane();
                let c = t.channels();
                for s in t.data.chunks_mut(c * plane) {
                    for (ch, chunk) in s.chunks_mut(plane).enumerate() {
                        let denom = p[1][ch].sqrt().max(1e-7);
                        chunk.iter_mut().for_each(|v| *v = (*v - p[0][ch]) / denom);
                    }
                }
                (t, Aux::None)
            }
            Op::ZeroPad(pad) => (pad_copy(ins[0], out_shape, pad.top, pad.left), Aux::None),
            Op::Crop(pad) => (crop_copy(ins[0], out_shape, pad.top, pad.left), Aux::None),
            Op::Conv(c) => {
                let g = conv_geom(in_shape, out_shape, c.kernel, c.stride, c.padding);
                let bias = c.bias.then(|| p[1].as_slice());
                let t = conv_forward(ins[0], &p[0], bias, &g, c.filters);
                apply_activation(c.activation, t, record)
            }
            Op::Depthwise(c) => {
                let g = conv_geom(in_shape, out_shape, c.kernel, c.stride, c.padding);
                let mut t = depthwise_batch(ins[0], &p[0], &g);
                if c.bias {
                    add_channel_bias(&mut t, &p[1]);
                }
                apply_activation(c.activation, t, record)
            }
            Op::Separable(c) => {
                let g = conv_geom(in_shape, out_shape, c.kernel, c.stride, c.padding);
                let mid = depthwise_batch(ins[0], &p[0], &g);
                let pg = conv_geom([in_shape[0], out_shape[1], out_shape[2]], out_shape, (1, 1), (1, 1), Padding::Valid);
                let bias = c.bias.then(|| p[2].as_slice());
                let t = conv_forward(&mid, &p[1], bias, &pg, c.filters);
                let (out, a) = apply_activation(c.activation, t, record);
                let pre = match a {
                    Aux::Pre(t) => Some(t),
                    _ => None,
                };
                let aux = if record { Aux::Separable { mid, pre } } else { Aux::None };
                (out, aux)
            }
            Op::BatchNorm(bn) => {
                let x = ins[0];
                let c = x.channels();
                let plane = x.plane();
                let (gamma, beta, mm, mv) = bn_params(bn.scale, bn.center, p, c);
                let batch_mode = opts.train && opts.trainable[id];
                let (mean, var) = if batch_mode {
                    let m = (n * plane) as f32;
                    let mut mean = vec![0.0f64; c];
                    for s in x.data.chunks(c * plane) {
                        for (ch, chunk) in s.chunks(plane).enumerate() {
                            mean[ch] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                        }
                    }
                    mean.iter_mut().for_each(|v| *v /= m as f64);
                    let mut var = vec![0.0f64; c];
                    for s in x.data.chunks(c * plane) {
                        for (ch, chunk) in s.chunks(plane).enumerate() {
                            var[ch] += chunk.iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
                        }
                    }
                    let biased: Vec<f32> = var.iter().map(|v| (v / m as f64) as f32).collect();
                    let unbiased: Vec<f32> = var
                        .iter()
                        .map(|v| (v / (m as f64 - 1.0).max(1.0)) as f32)
                        .collect();
                    let mean: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
                    bn_stats.push((id, mean.clone(), unbiased));
                    (mean, biased)
                } else {
                    (mm.to_vec(), mv.to_vec())
                };
                let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
                let mut t = x.clone();
                for s in t.data.chunks_mut(c * plane) {
                    for (ch, chunk) in s.chunks_mut(plane).enumerate() {
                        let scale = gamma.map_or(1.0, |g| g[ch]) * inv_std[ch];
                        let shift = beta.map_or(0.0, |b| b[ch]) - mean[ch] * scale;
                        chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
                    }
                }
                (t, if record { Aux::Bn { mean, inv_std } } else { Aux::None })
            }
            Op::Act(a) => {
                let mut t = ins[0].clone();
                let (c, plane) = (t.channels(), t.plane());
                kernels::activate(*a, &mut t.data, c, plane);
                (t, Aux::None)
            }
            Op::AddScalar(s) => {
                let mut t = ins[0].clone();
                t.data.iter_mut().for_each(|v| *v += s);
                (t, Aux::None)
            }
            Op::MulScalar(s) => {
                let mut t = ins[0].clone();
                t.data.iter_mut().for_each(|v| *v *= s);
                (t, Aux::None)
            }
            Op::Pool(pool) => {
                let g = conv_geom(in_shape, out_shape, pool.size, pool.stride, pool.padding);
                (pool_forward(ins[0], pool.kind, &g), Aux::None)
            }
            Op::GlobalAvgPool => {
                let x = ins[0];
                let plane = x.plane() as f32;
                let data = x.data.chunks(x.plane()).map(|c| c.iter().sum::<f32>() / plane).collect();
                (Tensor::from_vec([n, x.channels(), 1, 1], data), Aux::None)
            }
            Op::Dense(d) => {
                let x = ins[0];
                let cin = x.sample_len();
                let mut t = Tensor::zeros([n, d.units, 1, 1]);
                if d.bias {
                    for row in t.data.chunks_mut(d.units) {
                        row.copy_from_slice(&p[1]);
                    }
                }
                // y[n, u] = x[n, c] * W[u, c]^T
                kernels::gemm(n, cin, d.units, &x.data, (cin, 1), &p[0], (1, cin), if d.bias { 1.0 } else { 0.0 }, &mut t.data);
                apply_activation(d.activation, t, record)
            }
            Op::Dropout { rate, per_sample } => {
                if opts.train && *rate > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, id));
                    let keep = 1.0 - rate;
                    let len = if *per_sample { n } else { ins[0].data.len() };
                    let mask: Vec<f32> = (0..len)
                        .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mut t = ins[0].clone();
                    if *per_sample {
                        let sl = t.sample_len();
                        for (b, chunk) in t.data.chunks_mut(sl).enumerate() {
                            chunk.iter_mut().for_each(|v| *v *= mask[b]);
                        }
                    } else {
                        for (v, m) in t.data.iter_mut().zip(&mask) {
                            *v *= m;
                        }
                    }
                    (t, Aux::Mask(mask))
                } else {
                    (ins[0].clone(), Aux::None)
                }
            }
            Op::Reshape => (ins[0].clone(), Aux::None),
            Op::Add => {
                let mut t = ins[0].clone();
                for other in &ins[1..] {
                    t.add_assign(other);
                }
                (t, Aux::None)
            }
            Op::Multiply => {
                let mut t = multiply(ins[0], ins[1]);
                for other in &ins[2..] {
                    t = multiply(&t, other);
                }
                (t, Aux::None)
            }
            Op::Concat => {
                let mut t = Tensor::zeros(batch_dims(n, out_shape));
                for b in 0..n {
                    let mut off = 0;
                    for x in &ins {
                        let s = x.sample(b);
                        t.sample_mut(b)[off..off + s.len()].copy_from_slice(s);
                        off += s.len();
                    }
                }
                (t, Aux::None)
            }
            Op::ScaledSum { scale } => {
                let mut t = ins[0].clone();
                for (v, w) in t.data.iter_mut().zip(&ins[1].data) {
                    *v += w * scale;
                }
                (t, Aux::None)
            }
        };
        debug_assert_eq!(out.dims, batch_dims(n, out_shape), "node {}", node.name);
        acts[id] = Some(out);
        aux[id] = a;
        if !opts.keep_all {
            for &i in &node.inputs {
                remaining[i] -= 1;
                if remaining[i] == 0 && i != graph.output {
                    acts[i] = None;
                }
            }
        }
    }
    Trace { acts, aux, bn_stats }
}

type BnParams<'a> = (Option<&'a [f32]>, Option<&'a [f32]>, &'a [f32], &'a [f32]);

fn bn_params(scale: bool, center: bool, p: &NodeParams, c: usize) -> BnParams<'_> {
    let mut idx = 0;
    let gamma = scale.then(|| {
        idx += 1;
        p[idx - 1].as_slice()
    });
    let beta = center.then(|| {
        idx += 1;
        p[idx - 1].as_slice()
    });
    debug_assert_eq!(p[idx].len(), c);
    (gamma, beta, &p[idx], &p[idx + 1])
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions<'a> {
    pub trainable: &'a [bool],
    /// Node whose output gradient should be returned.
    pub capture: Option<NodeId>,
    /// The seed is the gradient w.r.t. the output node's pre-activation
    /// (e.g. `p - y` for sigmoid/softmax cross-entropy) rather than its output.
    pub seed_is_pre_activation: bool,
}

#[derive(Debug)]
pub struct Gradients {
    /// Per node, per parameter; `None` for nodes that received no gradient,
    /// empty buffers for non-trainable statistics.
    pub params: Vec<Option<NodeParams>>,
    pub captured: Option<Tensor>,
}

/// Whether each node's output gradient is needed: true when the node itself
/// or anything upstream of it owns trainable parameters or is captured.
pub fn gradient_flow(graph: &Graph, trainable: &[bool], capture: Option<NodeId>) -> Vec<bool> {
    let mut flow = vec![false; graph.len()];
    for (id, node) in graph.nodes.iter().enumerate() {
        let owns = trainable[id] && graph.params[id].iter().any(|p| p.trainable);
        flow[id] = owns || capture == Some(id) || node.inputs.iter().any(|&i| flow[i]);
    }
    flow
}

pub fn backward(graph: &Graph, params: &[NodeParams], trace: &Trace, seed: Tensor, opts: &BackwardOptions) -> Gradients {
    let flow = gradient_flow(graph, opts.trainable, opts.capture);
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.len()];
    let mut param_grads: Vec<Option<NodeParams>> = vec![None; graph.len()];
    let mut captured = None;
    grads[graph.output] = Some(seed);
    for id in (1..graph.len()).rev() {
        let Some(mut dy) = grads[id].take() else { continue };
        if opts.capture == Some(id) {
            captured = Some(dy.clone());
        }
        let node = &graph.nodes[id];
        let want_params = opts.trainable[id] && graph.params[id].iter().any(|p| p.trainable);
        let want_in: Vec<bool> = node.inputs.iter().map(|&i| flow[i]).collect();
        if !want_params && !want_in.iter().any(|&w| w) {
            continue;
        }
        let x = |k: usize| trace.acts[node.inputs[k]].as_ref().expect("backward needs a full trace");
        let y = trace.acts[id].as_ref().expect("backward needs a full trace");
        let p = &params[id];
        let in_shape = graph.nodes[node.inputs[0]].shape;
        let out_shape = node.shape;
        let fused_pre = |dy: &mut Tensor, a: Activation| {
            if a == Activation::Linear || (id == graph.output && opts.seed_is_pre_activation) {
                return;
            }
            let pre = trace.pre_activation(id).expect("fused activation recorded");
            let (c, plane) = (dy.channels(), dy.plane());
            kernels::activate_backward(a, &pre.data, &y.data, &mut dy.data, c, plane);
        };
        let mut input_grads: Vec<Option<Tensor>> = vec![None; node.inputs.len()];
        let mut pg: NodeParams = Vec::new();
        match &node.op {
            Op::Input => unreachable!(),
            Op::Rescale { scale, .. } => {
                dy.data.iter_mut().for_each(|v| *v *= scale);
                input_grads[0] = Some(dy);
            }
            Op::Normalize => {
                let plane = dy.plane();
                let c = dy.channels();
                for s in dy.data.chunks_mut(c * plane) {
                    for (ch, chunk) in s.chunks_mut(plane).enumerate() {
                        let denom = p[1][ch].sqrt().max(1e-7);
                        chunk.iter_mut().for_each(|v| *v /= denom);
                    }
                }
                pg = vec![Vec::new(); 3];
                input_grads[0] = Some(dy);
            }
            Op::ZeroPad(pad) => input_grads[0] = Some(crop_copy(&dy, in_shape, pad.top, pad.left)),
            Op::Crop(pad) => input_grads[0] = Some(pad_copy(&dy, in_shape, pad.top, pad.left)),
            Op::Conv(c) => {
                fused_pre(&mut dy, c.activation);
                let g = conv_geom(in_shape, out_shape, c.kernel, c.stride, c.padding);
                let (dk, db, dx) = conv_backward(x(0), &p[0], &dy, &g, c.filters, want_params, want_in[0]);
                if want_params {
                    pg.push(dk);
                    if c.bias {
                        pg.push(db);
                    }
                }
                input_grads[0] = dx;
            }
            Op::Depthwise(c) => {
                fused_pre(&mut dy, c.activation);
                let g = conv_geom(in_shape, out_shape, c.kernel, c.stride, c.padding);
                let xin = x(0);
                let mut dk = if want_params { vec![0.0; p[0].len()] } else { Vec::new() };
                let mut dx = want_in[0].then(|| Tensor::zeros(xin.dims));
                for b in 0..xin.batch() {
                    kernels::depthwise_backward(
                        xin.sample(b),
                        &p[0],
                        dy.sample(b),
                        &g,
                        want_params.then_some(dk.as_mut_slice()),
                        dx.as_mut().map(|t| t.sample_mut(b)),
                    );
                }
                if want_params {
                    pg.push(dk);
                    if c.bias {
                        pg.push(channel_sums(&dy));
                    }
                }
                input_grads[0] = dx;
            }
            Op::Separable(c) => {
                fused_pre(&mut dy, c.activation);
                let Aux::Separable { mid, .. } = &trace.aux[id] else {
                    panic!("separable conv trace missing")
                };
                let g = conv_geom(in_shape, out_shape, c.kernel, c.stride, c.padding);
                let pgeom = conv_geom([in_shape[0], out_shape[1], out_shape[2]], out_shape, (1, 1), (1, 1), Padding::Valid);
                let need_mid = want_params || want_in[0];
                let (dpk, db, dmid) = conv_backward(mid, &p[1], &dy, &pgeom, c.filters, want_params, need_mid);
                let dmid = dmid.expect("mid gradient");
                let xin = x(0);
                let mut ddk = if want_params { vec![0.0; p[0].len()] } else { Vec::new() };
                let mut dx = want_in[0].then(|| Tensor::zeros(xin.dims));
                for b in 0..xin.batch() {
                    kernels::depthwise_backward(
                        xin.sample(b),
                        &p[0],
                        dmid.sample(b),
                        &g,
                        want_params.then_some(ddk.as_mut_slice()),
                        dx.as_mut().map(|t| t.sample_mut(b)),
                    );
                }
                if want_params {
                    pg.push(ddk);
                    pg.push(dpk);
                    if c.bias {
                        pg.push(db);
                    }
                }
                input_grads[0] = dx;
            }
            Op::BatchNorm(bn) => {
                let xin = x(0);
                let c = xin.channels();
                let plane = xin.plane();
                let (gamma, _, _, _) = bn_params(bn.scale, bn.center, p, c);
                let Aux::Bn { mean, inv_std } = &trace.aux[id] else {
                    panic!("batch-norm trace missing")
                };
                let batch_mode = trace.bn_stats.iter().any(|(n, _, _)| *n == id);
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for (xs, ds) in xin.data.chunks(c * plane).zip(dy.data.chunks(c * plane)) {
                    for ch in 0..c {
                        let xc = &xs[ch * plane..(ch + 1) * plane];
                        let dc = &ds[ch * plane..(ch + 1) * plane];
                        for (xv, dv) in xc.iter().zip(dc) {
                            let xhat = (xv - mean[ch]) * inv_std[ch];
                            dgamma[ch] += dv * xhat;
                            dbeta[ch] += dv;
                        }
                    }
                }
                if want_in[0] {
                    let mut dx = Tensor::zeros(xin.dims);
                    let m = (xin.batch() * plane) as f32;
                    for ((xs, ds), dxs) in xin
                        .data
                        .chunks(c * plane)
                        .zip(dy.data.chunks(c * plane))
                        .zip(dx.data.chunks_mut(c * plane))
                    {
                        for ch in 0..c {
                            let g = gamma.map_or(1.0, |g| g[ch]);
                            let k = g * inv_std[ch];
                            for i in ch * plane..(ch + 1) * plane {
                                dxs[i] = if batch_mode {
                                    let xhat = (xs[i] - mean[ch]) * inv_std[ch];
                                    k / m * (m * ds[i] - dbeta[ch] - xhat * dgamma[ch])
                                } else {
                                    k * ds[i]
                                };
                            }
                        }
                    }
                    input_grads[0] = Some(dx);
                }
                if want_params {
                    if bn.scale {
                        pg.push(dgamma);
                    }
                    if bn.center {
                        pg.push(dbeta);
                    }
                    pg.push(Vec::new());
                    pg.push(Vec::new());
                }
            }
            Op::Act(a) => {
                let (c, plane) = (dy.channels(), dy.plane());
                kernels::activate_backward(*a, &x(0).data, &y.data, &mut dy.data, c, plane);
                input_grads[0] = Some(dy);
            }
            Op::AddScalar(_) | Op::Reshape => input_grads[0] = Some(dy),
            Op::MulScalar(s) => {
                dy.data.iter_mut().for_each(|v| *v *= s);
                input_grads[0] = Some(dy);
            }
            Op::Pool(pool) => {
                let g = conv_geom(in_shape, out_shape, pool.size, pool.stride, pool.padding);
                input_grads[0] = Some(pool_backward(x(0), y, &dy, pool.kind, &g));
            }
            Op::GlobalAvgPool => {
                let xin = x(0);
                let plane = xin.plane();
                let mut dx = Tensor::zeros(xin.dims);
                for (chunk, d) in dx.data.chunks_mut(plane).zip(&dy.data) {
                    chunk.fill(d / plane as f32);
                }
                input_grads[0] = Some(dx);
            }
            Op::Dense(d) => {
                fused_pre(&mut dy, d.activation);
                let xin = x(0);
                let n = xin.batch();
                let cin = xin.sample_len();
                if want_params {
                    let mut dk = vec![0.0; d.units * cin];
                    // dW[u, c] = dy[n, u]^T * x[n, c]
                    kernels::gemm(d.units, n, cin, &dy.data, (1, d.units), &xin.data, (cin, 1), 0.0, &mut dk);
                    pg.push(dk);
                    if d.bias {
                        let mut db = vec![0.0; d.units];
                        for row in dy.data.chunks(d.units) {
                            for (b, v) in db.iter_mut().zip(row) {
                                *b += v;
                            }
                        }
                        pg.push(db);
                    }
                }
                if want_in[0] {
                    let mut dx = Tensor::zeros(xin.dims);
                    kernels::gemm(n, d.units, cin, &dy.data, (d.units, 1), &p[0], (cin, 1), 0.0, &mut dx.data);
                    input_grads[0] = Some(dx);
                }
            }
            Op::Dropout { per_sample, .. } => {
                if let Aux::Mask(mask) = &trace.aux[id] {
                    if *per_sample {
                        let sl = dy.sample_len();
                        for (b, chunk) in dy.data.chunks_mut(sl).enumerate() {
                            chunk.iter_mut().for_each(|v| *v *= mask[b]);
                        }
                    } else {
                        for (v, m) in dy.data.iter_mut().zip(mask) {
                            *v *= m;
                        }
                    }
                }
                input_grads[0] = Some(dy);
            }
            Op::Add => {
                for g in input_grads.iter_mut() {
                    *g = Some(dy.clone());
                }
            }
            Op::Multiply => {
                assert_eq!(node.inputs.len(), 2, "multiply backward supports two inputs");
                if want_in[0] {
                    input_grads[0] = Some(multiply_grad(x(0), x(1), &dy));
                }
                if want_in[1] {
                    input_grads[1] = Some(multiply_grad(x(1), x(0), &dy));
                }
            }
            Op::Concat => {
                let n = dy.batch();
                let mut off = 0;
                for k in 0..node.inputs.len() {
                    let xin = x(k);
                    let len = xin.sample_len();
                    if want_in[k] {
                        let mut g = Tensor::zeros(xin.dims);
                        for b in 0..n {
                            g.sample_mut(b).copy_from_slice(&dy.sample(b)[off..off + len]);
                        }
                        input_grads[k] = Some(g);
                    }
                    off += len;
                }
            }
            Op::ScaledSum { scale } => {
                let mut b = dy.clone();
                b.data.iter_mut().for_each(|v| *v *= scale);
                input_grads[0] = Some(dy);
                input_grads[1] = Some(b);
            }
        }
        if want_params {
            param_grads[id] = Some(pg);
        }
        for (k, g) in input_grads.into_iter().enumerate() {
            let src = node.inputs[k];
            if !flow[src] {
                continue;
            }
            if let Some(g) = g {
                match grads[src].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => grads[src] = Some(g),
                }
            }
        }
    }
    if opts.capture == Some(0) {
        captured = grads[0].take();
    }
    Gradients {
        params: param_grads,
        captured,
    }
}
