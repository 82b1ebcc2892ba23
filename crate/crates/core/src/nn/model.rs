use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::exec::{self, BackwardOptions, ForwardOptions, Gradients, NodeParams, Trace};
use super::graph::{Graph, NodeId, Op};
use super::tensor::Tensor;

/// A graph together with its parameter values and per-node trainable flags.
#[derive(Debug, Clone)]
pub struct Model {
    pub graph: Graph,
    pub params: Vec<NodeParams>,
    pub trainable: Vec<bool>,
}

fn init_node(graph: &Graph, id: NodeId, rng: &mut ChaCha8Rng) -> NodeParams {
    let node = &graph.nodes[id];
    graph.params[id]
        .iter()
        .map(|spec| {
            let len = spec.len();
            match spec.name {
                "kernel" | "depthwise_kernel" | "pointwise_kernel" => {
                    // Glorot-uniform with the receptive field folded into the fans.
                    let d = &spec.dims;
                    let (fan_in, fan_out) = match (&node.op, spec.name) {
                        (Op::Dense(_), _) => (d[1], d[0]),
                        (_, "depthwise_kernel") => (d[2] * d[3], d[2] * d[3]),
                        _ => (d[1] * d[2] * d[3], d[0] * d[2] * d[3]),
                    };
                    let limit = (6.0 / (fan_in + fan_out).max(1) as f32).sqrt();
                    (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
                }
                "gamma" | "moving_variance" | "variance" => vec![1.0; len],
                _ => vec![0.0; len],
            }
        })
        .collect()
}

impl Model {
    /// Deterministically initialised model; every node starts trainable.
    pub fn init(graph: Graph, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..graph.len()).map(|i| init_node(&graph, i, &mut rng)).collect();
        let trainable = vec![true; graph.len()];
        Model {
            graph,
            params,
            trainable,
        }
    }

    /// Re-initialises the parameters of nodes `from..` only.
    pub fn reinit_from(&mut self, from: NodeId, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in from..self.graph.len() {
            self.params[i] = init_node(&self.graph, i, &mut rng);
        }
    }

    pub fn param_count(&self) -> usize {
        self.graph.total_params()
    }

    pub fn trainable_param_count(&self) -> usize {
        (0..self.graph.len())
            .filter(|&i| self.trainable[i])
            .flat_map(|i| self.graph.params[i].iter())
            .filter(|p| p.trainable)
            .map(|p| p.len())
            .sum()
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        self.trainable.iter_mut().for_each(|t| *t = on);
    }

    /// Appends a layer after the current output, initialised from `seed`.
    pub fn push(&mut self, name: impl Into<String>, op: Op, seed: u64) -> NodeId {
        let out = self.graph.output;
        let id = self.graph.push(name, op, &[out]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params.push(init_node(&self.graph, id, &mut rng));
        self.trainable.push(true);
        id
    }

    /// Drops every node after `len - 1`, making `output` the model output.
    pub fn truncate(&mut self, len: usize, output: NodeId) {
        self.graph.truncate(len, output);
        self.params.truncate(len);
        self.trainable.truncate(len);
    }

    pub fn forward(&self, input: Tensor, train: bool, seed: u64, keep_all: bool) -> Trace {
        let opts = ForwardOptions {
            train,
            trainable: &self.trainable,
            seed,
            keep_all,
        };
        exec::forward(&self.graph, &self.params, input, &opts)
    }

    /// Inference in fixed-size chunks.
    pub fn predict(&self, input: &Tensor, batch: usize) -> Tensor {
        let n = input.batch();
        let chw = [input.dims[1], input.dims[2], input.dims[3]];
        let out_shape = self.graph.output_shape();
        let mut out = Vec::with_capacity(n * out_shape.iter().product::<usize>());
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let samples: Vec<&[f32]> = (start..end).map(|i| input.sample(i)).collect();
            let t = self.forward(Tensor::stack(&samples, chw), false, 0, false);
            out.extend_from_slice(&t.take_output(&self.graph).data);
            start = end;
        }
        Tensor::from_vec([n, out_shape[0], out_shape[1], out_shape[2]], out)
    }

    pub fn backward(&self, trace: &Trace, seed: Tensor, capture: Option<NodeId>, seed_is_pre_activation: bool) -> Gradients {
        let opts = BackwardOptions {
            trainable: &self.trainable,
            capture,
            seed_is_pre_activation,
        };
        exec::backward(&self.graph, &self.params, trace, seed, &opts)
    }

    /// Folds batch statistics from a training pass into the moving averages.
    pub fn apply_bn_stats(&mut self, trace: &Trace) {
        for (id, mean, var) in &trace.bn_stats {
            let Op::BatchNorm(bn) = &self.graph.nodes[*id].op else {
                continue;
            };
            let specs = &self.graph.params[*id];
            let mi = specs.iter().position(|s| s.name == "moving_mean").expect("moving mean");
            let vi = mi + 1;
            let m = bn.momentum;
            for (mv, b) in self.params[*id][mi].iter_mut().zip(mean) {
                *mv = *mv * m + b * (1.0 - m);
            }
            for (mv, b) in self.params[*id][vi].iter_mut().zip(var) {
                *mv = *mv * m + b * (1.0 - m);
            }
        }
    }

    /// SHA-256 over the raw parameter bytes of nodes in `range`.
    pub fn checksum(&self, range: std::ops::Range<NodeId>) -> String {
        let mut h = Sha256::new();
        for i in range {
            for buf in &self.params[i] {
                for v in buf {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<Vec<f32>>>,
    v: Vec<Vec<Vec<f32>>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32) -> Adam {
        Adam {
            beta1,
            beta2,
            eps: 1e-7,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f32) {
        if self.m.len() < model.params.len() {
            self.m.resize(model.params.len(), Vec::new());
            self.v.resize(model.params.len(), Vec::new());
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let alpha = lr * c2.sqrt() / c1;
        for (id, g) in grads.params.iter().enumerate() {
            let Some(g) = g else { continue };
            if !model.trainable[id] {
                continue;
            }
            let specs = &model.graph.params[id];
            if self.m[id].is_empty() {
                self.m[id] = specs.iter().map(|s| vec![0.0; s.len()]).collect();
                self.v[id] = specs.iter().map(|s| vec![0.0; s.len()]).collect();
            }
            for (k, spec) in specs.iter().enumerate() {
                if !spec.trainable || g[k].is_empty() {
                    continue;
                }
                let p = &mut model.params[id][k];
                let m = &mut self.m[id][k];
                let v = &mut self.v[id][k];
                for i in 0..p.len() {
                    let gi = g[k][i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    p[i] -= alpha * m[i] / (v[i].sqrt() + self.eps * c2.sqrt());
                }
            }
        }
    }
}
