//! Parameter, FLOP, timing and footprint measurements in the shape of the
//! complexity table.
//!
//! FLOP convention (batch size one, multiplies and adds counted separately):
//!
//! | layer                         | FLOPs                                        |
//! |-------------------------------|----------------------------------------------|
//! | conv / dense / depthwise      | 2 x multiply-accumulates, + 1 per bias add   |
//! | separable                     | depthwise part + pointwise part              |
//! | swish, hard-swish activation  | 1 per element (the product)                  |
//! | other activations             | 0                                            |
//! | batch norm                    | 0 (folded into the preceding layer)          |
//! | add / multiply of n inputs    | n - 1 per output element                     |
//! | scalar add / scalar multiply  | 1 per element                                |
//! | scaled sum `a + s*b`          | 2 per element                                |
//! | pooling                       | kernel area per output element               |
//! | global average pooling        | 1 per input element                          |
//! | rescale                       | 1 per element, 2 with an offset              |
//! | normalize                     | 2 per element                                |
//! | padding, crop, concat, etc.   | 0                                            |

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Graph, NodeId, Op};
use crate::{Error, Result};

pub const FLOP_CONVENTION: &str = "2xMAC+bias; swish 1/elem; bn 0; eltwise (n-1)/elem; pool k*k/out; gap 1/in";

/// Trainable plus non-trainable parameters.
pub fn count_params(graph: &Graph) -> usize {
    graph.total_params()
}

fn act_flops(a: Activation, elems: u64) -> u64 {
    match a {
        Activation::Swish | Activation::HardSwish => elems,
        _ => 0,
    }
}

/// FLOPs of one node under the module-level convention.
pub fn node_flops(graph: &Graph, id: NodeId) -> u64 {
    let node = &graph.nodes[id];
    let [co, ho, wo] = node.shape.map(|d| d as u64);
    let out = co * ho * wo;
    let ins = graph.input_shapes(id);
    let cin = ins.first().map_or(0, |s| s[0] as u64);
    match &node.op {
        Op::Conv(c) => {
            let k = (c.kernel.0 * c.kernel.1) as u64;
            2 * k * cin * out + if c.bias { out } else { 0 } + act_flops(c.activation, out)
        }
        Op::Depthwise(d) => {
            let k = (d.kernel.0 * d.kernel.1) as u64;
            2 * k * out + if d.bias { out } else { 0 } + act_flops(d.activation, out)
        }
        Op::Separable(s) => {
            let k = (s.kernel.0 * s.kernel.1) as u64;
            let mid = cin * ho * wo;
            2 * k * mid + 2 * cin * out + if s.bias { out } else { 0 } + act_flops(s.activation, out)
        }
        Op::Dense(d) => {
            let fan_in = ins[0].iter().product::<usize>() as u64;
            2 * fan_in * out + if d.bias { out } else { 0 } + act_flops(d.activation, out)
        }
        Op::Act(a) => act_flops(*a, out),
        Op::Add | Op::Multiply => (ins.len() as u64).saturating_sub(1) * out,
        Op::AddScalar(_) | Op::MulScalar(_) => out,
        Op::ScaledSum { .. } => 2 * out,
        Op::Pool(p) => (p.size.0 * p.size.1) as u64 * out,
        Op::GlobalAvgPool => ins[0].iter().product::<usize>() as u64,
        Op::Rescale { offset, .. } => {
            if *offset != 0.0 {
                2 * out
            } else {
                out
            }
        }
        Op::Normalize => 2 * out,
        Op::Input
        | Op::ZeroPad(_)
        | Op::Crop(_)
        | Op::BatchNorm(_)
        | Op::Dropout { .. }
        | Op::Reshape
        | Op::Concat => 0,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FlopCount {
    pub total: u64,
    /// Totals per layer class.
    pub by_kind: BTreeMap<&'static str, u64>,
    pub convention: &'static str,
}

/// Analytic forward-pass FLOPs at batch size one.
pub fn count_flops(graph: &Graph) -> FlopCount {
    let mut by_kind = BTreeMap::new();
    let mut total = 0;
    for id in 0..graph.len() {
        let f = node_flops(graph, id);
        *by_kind.entry(graph.nodes[id].op.kind()).or_insert(0) += f;
        total += f;
    }
    FlopCount {
        total,
        by_kind,
        convention: FLOP_CONVENTION,
    }
}

/// Bytes needed to hold the parameters plus the largest pair of live
/// activations for a single image, in f32.
pub fn memory_footprint_bytes(graph: &Graph) -> u64 {
    let largest = graph
        .nodes
        .iter()
        .map(|n| n.shape.iter().product::<usize>() as u64)
        .max()
        .unwrap_or(0);
    4 * (graph.total_params() as u64 + 2 * largest)
}

/// Raw timing log of one measurement.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingLog {
    pub warmup: usize,
    pub samples_sec: Vec<f64>,
}

impl TimingLog {
    pub fn mean(&self) -> f64 {
        mean(&self.samples_sec)
    }

    /// Coefficient of variation; above 0.25 the device was probably busy.
    pub fn variation(&self) -> f64 {
        let m = self.mean();
        if self.samples_sec.len() < 2 || m == 0.0 {
            return 0.0;
        }
        let var = self.samples_sec.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (self.samples_sec.len() - 1) as f64;
        var.sqrt() / m
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Runs `f` `warmup` times untimed, then `reps` times timed.
pub fn time_reps<F: FnMut() -> Result<()>>(warmup: usize, reps: usize, mut f: F) -> Result<TimingLog> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples_sec = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples_sec.push(t.elapsed().as_secs_f64());
    }
    Ok(TimingLog { warmup, samples_sec })
}

pub const INFERENCE_WARMUP: usize = 10;
pub const INFERENCE_REPS: usize = 300;
pub const TRAIN_EPOCHS: usize = 3;

/// One row of `complexity.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model: String,
    pub params_millions: f64,
    pub flops_giga: f64,
    pub train_sec_per_epoch: f64,
    pub disk_mb: f64,
    pub accel_mem_mb: f64,
    pub inference_sec: f64,
    /// `HxWxC`.
    pub input_shape: String,
}

pub struct RuntimeProfile {
    pub train: TimingLog,
    pub inference: TimingLog,
    pub disk_bytes: u64,
    pub memory_bytes: u64,
}

/// Times `epochs` training epochs and `reps` single-image inferences (after
/// the fixed warm-up), and stats the saved artifact at `artifact`.
pub fn measure_runtime_profile<T, I>(
    graph: &Graph,
    artifact: &Path,
    epochs: usize,
    reps: usize,
    train_epoch: T,
    infer: I,
) -> Result<RuntimeProfile>
where
    T: FnMut() -> Result<()>,
    I: FnMut() -> Result<()>,
{
    let train = time_reps(0, epochs, train_epoch)?;
    let inference = time_reps(INFERENCE_WARMUP, reps, infer)?;
    let disk_bytes = std::fs::metadata(artifact).map_err(|e| Error::io(artifact, e))?.len();
    Ok(RuntimeProfile {
        train,
        inference,
        disk_bytes,
        memory_bytes: memory_footprint_bytes(graph),
    })
}

pub fn megabytes(bytes: u64) -> f64 {
    bytes as f64 / (1u64 << 20) as f64
}

pub fn report(name: &str, graph: &Graph, runtime: Option<&RuntimeProfile>) -> ComplexityReport {
    let [c, h, w] = graph.input_shape();
    ComplexityReport {
        model: name.to_string(),
        params_millions: count_params(graph) as f64 / 1e6,
        flops_giga: count_flops(graph).total as f64 / 1e9,
        train_sec_per_epoch: runtime.map_or(0.0, |r| r.train.mean()),
        disk_mb: runtime.map_or(0.0, |r| megabytes(r.disk_bytes)),
        accel_mem_mb: megabytes(runtime.map_or_else(|| memory_footprint_bytes(graph), |r| r.memory_bytes)),
        inference_sec: runtime.map_or(0.0, |r| r.inference.mean()),
        input_shape: format!("{h}x{w}x{c}"),
    }
}

pub fn write_csv<W: Write>(rows: &[ComplexityReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("complexity.csv", e))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ComplexityReport>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Dense, GraphBuilder, Padding};

    #[test]
    fn pointwise_conv_with_bias_is_three_flops() {
        let mut g = GraphBuilder::new();
        let x = g.input([1, 1, 1]);
        let op = Op::Conv(Conv2d {
            filters: 1,
            kernel: (1, 1),
            stride: (1, 1),
            padding: Padding::Valid,
            bias: true,
            activation: Activation::Linear,
        });
        let c = g.node(op, &[x], None);
        assert_eq!(count_flops(&g.build(c)).total, 3);
    }

    #[test]
    fn dense_ten_to_one_has_eleven_params() {
        let mut g = GraphBuilder::new();
        let x = g.input([10, 1, 1]);
        let d = g.node(Op::Dense(Dense { units: 1, bias: true, activation: Activation::Sigmoid }), &[x], None);
        assert_eq!(count_params(&g.build(d)), 11);
    }

    #[test]
    fn mean_of_timings() {
        let log = TimingLog { warmup: 0, samples_sec: vec![1.0, 2.0, 3.0] };
        assert_eq!(log.mean(), 2.0);
    }

    #[test]
    fn time_reps_records_every_rep() {
        let mut calls = 0;
        let log = time_reps(INFERENCE_WARMUP, INFERENCE_REPS, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(log.samples_sec.len(), 300);
        assert_eq!(calls, 310);
    }
}
