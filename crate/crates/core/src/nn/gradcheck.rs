//! Finite-difference checks of the executor's gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::*;
use super::model::Model;
use super::tensor::Tensor;

fn conv(filters: usize, k: usize, s: usize, padding: Padding, activation: Activation) -> Op {
    Op::Conv(Conv2d {
        filters,
        kernel: (k, k),
        stride: (s, s),
        padding,
        bias: true,
        activation,
    })
}

/// Exercises every op kind in one graph.
fn kitchen_sink() -> Graph {
    let mut g = GraphBuilder::new();
    let x = g.input([3, 9, 9]);
    let r = g.node(Op::Rescale { scale: 0.5, offset: 0.1 }, &[x], None);
    let n = g.node(Op::Normalize, &[r], None);
    let p = g.node(Op::ZeroPad(Pad4 { top: 1, bottom: 0, left: 0, right: 1 }), &[n], None);
    let c1 = g.node(conv(4, 3, 2, Padding::Valid, Activation::Swish), &[p], None);
    let bn = g.node(Op::BatchNorm(BatchNorm::default()), &[c1], None);
    let dw = g.node(
        Op::Depthwise(DepthwiseConv2d {
            kernel: (3, 3),
            stride: (1, 1),
            padding: Padding::Same,
            bias: true,
            activation: Activation::Tanh,
        }),
        &[bn],
        None,
    );
    let sep = g.node(
        Op::Separable(SeparableConv2d {
            filters: 4,
            kernel: (3, 3),
            stride: (1, 1),
            padding: Padding::Same,
            bias: false,
            activation: Activation::HardSwish,
        }),
        &[dw],
        None,
    );
    let mp = g.node(
        Op::Pool(Pool2d { kind: PoolKind::Max, size: (2, 2), stride: (1, 1), padding: Padding::Same }),
        &[sep],
        None,
    );
    let ap = g.node(
        Op::Pool(Pool2d { kind: PoolKind::Avg, size: (3, 3), stride: (1, 1), padding: Padding::Same }),
        &[bn],
        None,
    );
    let cat = g.node(Op::Concat, &[mp, ap], None);
    // squeeze-excite style gate
    let sq = g.node(Op::GlobalAvgPool, &[cat], None);
    let sq = g.node(Op::Reshape, &[sq], None);
    let e = g.node(conv(8, 1, 1, Padding::Valid, Activation::Sigmoid), &[sq], None);
    let gated = g.node(Op::Multiply, &[cat, e], None);
    let a = g.node(Op::AddScalar(3.0), &[gated], None);
    let a = g.node(Op::MulScalar(0.5), &[a], None);
    let b = g.node(Op::Act(Activation::Softmax), &[cat], None);
    let sum = g.node(Op::ScaledSum { scale: 0.3 }, &[a, b], None);
    let sum = g.node(Op::Add, &[sum, cat], None);
    let crop = g.node(Op::Crop(Pad4 { top: 1, bottom: 0, left: 0, right: 1 }), &[sum], None);
    let drop = g.node(Op::Dropout { rate: 0.3, per_sample: false }, &[crop], None);
    let gap = g.node(Op::GlobalAvgPool, &[drop], None);
    let d = g.node(
        Op::Dense(Dense { units: 3, bias: true, activation: Activation::Softmax }),
        &[gap],
        None,
    );
    g.build(d)
}

fn loss(model: &Model, input: &Tensor, weights: &[f32]) -> f64 {
    let t = model.forward(input.clone(), true, 11, false);
    t.output(&model.graph)
        .data
        .iter()
        .zip(weights)
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum()
}

#[test]
fn gradients_match_finite_differences() {
    let graph = kitchen_sink();
    let mut model = Model::init(graph, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // non-trivial normalization statistics
    let norm = model.graph.find("normalization").unwrap();
    model.params[norm][0] = vec![0.1, -0.2, 0.05];
    model.params[norm][1] = vec![0.8, 1.5, 2.0];
    let input = Tensor::from_vec([2, 3, 9, 9], (0..2 * 3 * 81).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let out_len = 2 * 3;
    let weights: Vec<f32> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let trace = model.forward(input.clone(), true, 11, true);
    let seed = Tensor::from_vec([2, 3, 1, 1], weights.clone());
    let grads = model.backward(&trace, seed, Some(0), false);

    let eps = 2e-3f32;
    let mut checked = 0;
    for id in 0..model.graph.len() {
        let specs = model.graph.params[id].clone();
        for (k, spec) in specs.iter().enumerate() {
            if !spec.trainable {
                continue;
            }
            let analytic = &grads.params[id].as_ref().expect("grad present")[k];
            for _ in 0..4 {
                let i = rng.gen_range(0..spec.len());
                let orig = model.params[id][k][i];
                model.params[id][k][i] = orig + eps;
                let up = loss(&model, &input, &weights);
                model.params[id][k][i] = orig - eps;
                let down = loss(&model, &input, &weights);
                model.params[id][k][i] = orig;
                let numeric = (up - down) / (2.0 * eps as f64);
                let a = analytic[i] as f64;
                assert!(
                    (a - numeric).abs() <= 2e-3 + 3e-2 * numeric.abs().max(a.abs()),
                    "{}/{}[{i}]: analytic {a} numeric {numeric}",
                    model.graph.nodes[id].name,
                    spec.name
                );
                checked += 1;
            }
        }
    }
    assert!(checked > 20);

    let dx = grads.captured.expect("input gradient");
    for _ in 0..10 {
        let i = rng.gen_range(0..input.data.len());
        let mut up = input.clone();
        up.data[i] += eps;
        let mut down = input.clone();
        down.data[i] -= eps;
        let numeric = (loss(&model, &up, &weights) - loss(&model, &down, &weights)) / (2.0 * eps as f64);
        let a = dx.data[i] as f64;
        assert!((a - numeric).abs() <= 2e-3 + 3e-2 * numeric.abs(), "input[{i}]: {a} vs {numeric}");
    }
}

#[test]
fn frozen_batch_norm_uses_moving_statistics() {
    let mut g = GraphBuilder::new();
    let x = g.input([2, 3, 3]);
    let bn = g.node(Op::BatchNorm(BatchNorm::default()), &[x], None);
    let mut model = Model::init(g.build(bn), 0);
    model.params[1][2] = vec![1.0, -1.0];
    model.params[1][3] = vec![4.0, 0.25];
    model.trainable[1] = false;
    let input = Tensor::from_vec([1, 2, 3, 3], (0..18).map(|v| v as f32).collect());
    let t = model.forward(input.clone(), true, 0, true);
    assert!(t.bn_stats.is_empty());
    let out = t.output(&model.graph);
    let expect0 = (input.data[0] - 1.0) / (4.0f32 + 1e-3).sqrt();
    assert!((out.data[0] - expect0).abs() < 1e-6);
}

#[test]
fn stable_preactivation_seed_skips_output_activation() {
    let mut g = GraphBuilder::new();
    let x = g.input([2, 1, 1]);
    let d = g.node(Op::Dense(Dense { units: 1, bias: true, activation: Activation::Sigmoid }), &[x], None);
    let model = Model::init(g.build(d), 4);
    let input = Tensor::from_vec([1, 2, 1, 1], vec![0.5, -1.0]);
    let trace = model.forward(input, true, 0, true);
    let grads = model.backward(&trace, Tensor::from_vec([1, 1, 1, 1], vec![1.0]), None, true);
    let gk = &grads.params[1].as_ref().unwrap()[0];
    assert_eq!(gk, &vec![0.5, -1.0]);
}
