use super::net::{correct_pad, Net, Same, Valid};
use crate::nn::{Activation, Graph, NodeId, Op};

/// Rounds `v` to a multiple of `divisor`, never dropping more than 10%.
pub(crate) fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = (divisor).max(((v + d / 2.0) as usize) / divisor * divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    new_v
}

pub(crate) fn mobilenet_v2(size: usize) -> Graph {
    let mut n = Net::new();
    let input = n.input(size);
    let mut x = n.conv(input, "Conv1", 32, 3, 2, Same, false);
    x = n.bn_with(x, "bn_Conv1", 1e-3, 0.999, true);
    x = n.act(x, "Conv1_relu", Activation::Relu6);
    // (filters, stride, expansion) per block
    let blocks: [(usize, usize, usize); 17] = [
        (16, 1, 1),
        (24, 2, 6),
        (24, 1, 6),
        (32, 2, 6),
        (32, 1, 6),
        (32, 1, 6),
        (64, 2, 6),
        (64, 1, 6),
        (64, 1, 6),
        (64, 1, 6),
        (96, 1, 6),
        (96, 1, 6),
        (96, 1, 6),
        (160, 2, 6),
        (160, 1, 6),
        (160, 1, 6),
        (320, 1, 6),
    ];
    for (id, &(filters, stride, expansion)) in blocks.iter().enumerate() {
        let inputs = x;
        let in_ch = n.channels(x);
        let out_ch = make_divisible(filters as f64, 8);
        let prefix = if id == 0 { "expanded_conv_".to_string() } else { format!("block_{id}_") };
        let mut y = x;
        if id > 0 {
            y = n.conv(y, &format!("{prefix}expand"), expansion * in_ch, 1, 1, Same, false);
            y = n.bn_with(y, &format!("{prefix}expand_BN"), 1e-3, 0.999, true);
            y = n.act(y, &format!("{prefix}expand_relu"), Activation::Relu6);
        }
        let pad = if stride == 2 {
            let [_, h, w] = n.shape(y);
            y = n.pad(y, &format!("{prefix}pad"), correct_pad(h, w, 3));
            Valid
        } else {
            Same
        };
        y = n.depthwise(y, &format!("{prefix}depthwise"), 3, stride, pad);
        y = n.bn_with(y, &format!("{prefix}depthwise_BN"), 1e-3, 0.999, true);
        y = n.act(y, &format!("{prefix}depthwise_relu"), Activation::Relu6);
        y = n.conv(y, &format!("{prefix}project"), out_ch, 1, 1, Same, false);
        y = n.bn_with(y, &format!("{prefix}project_BN"), 1e-3, 0.999, true);
        x = if in_ch == out_ch && stride == 1 {
            n.add(&[inputs, y], &format!("{prefix}add"))
        } else {
            y
        };
    }
    x = n.conv(x, "Conv_1", 1280, 1, 1, Valid, false);
    x = n.bn_with(x, "Conv_1_bn", 1e-3, 0.999, true);
    x = n.act(x, "out_relu", Activation::Relu6);
    n.build(x)
}

#[derive(Clone, Copy)]
enum V3Act {
    Relu,
    HardSwish,
}

struct V3<'a> {
    n: &'a mut Net,
}

impl V3<'_> {
    /// `relu6(x + 3) / 6`, built from framework op layers.
    fn hard_sigmoid(&mut self, x: NodeId) -> NodeId {
        let a = self.n.op(Op::AddScalar(3.0), &[x], "");
        let r = self.n.act(a, "", Activation::Relu6);
        self.n.op(Op::MulScalar(1.0 / 6.0), &[r], "")
    }

    fn activation(&mut self, x: NodeId, a: V3Act) -> NodeId {
        match a {
            V3Act::Relu => self.n.act(x, "", Activation::Relu),
            V3Act::HardSwish => {
                let hs = self.hard_sigmoid(x);
                self.n.multiply(&[hs, x], "")
            }
        }
    }

    fn se(&mut self, inputs: NodeId, filters: usize, prefix: &str) -> NodeId {
        let n = &mut *self.n;
        let mut x = n.gap(inputs, &format!("{prefix}squeeze_excite/AvgPool"));
        x = n.reshape(x, "");
        x = n.conv(x, &format!("{prefix}squeeze_excite/Conv"), make_divisible(filters as f64 * 0.25, 8), 1, 1, Same, true);
        x = n.act(x, &format!("{prefix}squeeze_excite/Relu"), Activation::Relu);
        x = n.conv(x, &format!("{prefix}squeeze_excite/Conv_1"), filters, 1, 1, Same, true);
        let x = self.hard_sigmoid(x);
        self.n.multiply(&[inputs, x], &format!("{prefix}squeeze_excite/Mul"))
    }

    #[allow(clippy::too_many_arguments)]
    fn block(&mut self, x: NodeId, expansion: f64, filters: usize, k: usize, stride: usize, se: bool, a: V3Act, id: usize) -> NodeId {
        let shortcut = x;
        let infilters = self.n.channels(x);
        let expanded = make_divisible(infilters as f64 * expansion, 8);
        let prefix = if id == 0 { "expanded_conv/".to_string() } else { format!("expanded_conv_{id}/") };
        let mut y = x;
        if id > 0 {
            y = self.n.conv(y, &format!("{prefix}expand"), expanded, 1, 1, Same, false);
            y = self.n.bn_with(y, &format!("{prefix}expand/BatchNorm"), 1e-3, 0.999, true);
            y = self.activation(y, a);
        }
        let pad = if stride == 2 {
            let [_, h, w] = self.n.shape(y);
            y = self.n.pad(y, &format!("{prefix}depthwise/pad"), correct_pad(h, w, k));
            Valid
        } else {
            Same
        };
        y = self.n.depthwise(y, &format!("{prefix}depthwise"), k, stride, pad);
        y = self.n.bn_with(y, &format!("{prefix}depthwise/BatchNorm"), 1e-3, 0.999, true);
        y = self.activation(y, a);
        if se {
            y = self.se(y, expanded, &prefix);
        }
        y = self.n.conv(y, &format!("{prefix}project"), filters, 1, 1, Same, false);
        y = self.n.bn_with(y, &format!("{prefix}project/BatchNorm"), 1e-3, 0.999, true);
        if stride == 1 && infilters == filters {
            y = self.n.add(&[shortcut, y], &format!("{prefix}Add"));
        }
        y
    }
}

/// MobileNetV3 in the layout where the final 1x1 projection (`Conv_2`) runs
/// on the spatial map ahead of pooling, so it belongs to the backbone.
pub(crate) fn mobilenet_v3(size: usize, large: bool) -> Graph {
    use V3Act::{HardSwish as H, Relu as R};
    let mut n = Net::new();
    let input = n.input(size);
    let mut x = n.op(Op::Rescale { scale: 1.0 / 127.5, offset: -1.0 }, &[input], "");
    x = n.conv(x, "Conv", 16, 3, 2, Same, false);
    x = n.bn_with(x, "Conv/BatchNorm", 1e-3, 0.999, true);
    let mut v3 = V3 { n: &mut n };
    x = v3.activation(x, H);
    // (expansion, filters, kernel, stride, se, activation)
    let small: &[(f64, usize, usize, usize, bool, V3Act)] = &[
        (1.0, 16, 3, 2, true, R),
        (72.0 / 16.0, 24, 3, 2, false, R),
        (88.0 / 24.0, 24, 3, 1, false, R),
        (4.0, 40, 5, 2, true, H),
        (6.0, 40, 5, 1, true, H),
        (6.0, 40, 5, 1, true, H),
        (3.0, 48, 5, 1, true, H),
        (3.0, 48, 5, 1, true, H),
        (6.0, 96, 5, 2, true, H),
        (6.0, 96, 5, 1, true, H),
        (6.0, 96, 5, 1, true, H),
    ];
    let large_cfg: &[(f64, usize, usize, usize, bool, V3Act)] = &[
        (1.0, 16, 3, 1, false, R),
        (4.0, 24, 3, 2, false, R),
        (3.0, 24, 3, 1, false, R),
        (3.0, 40, 5, 2, true, R),
        (3.0, 40, 5, 1, true, R),
        (3.0, 40, 5, 1, true, R),
        (6.0, 80, 3, 2, false, H),
        (2.5, 80, 3, 1, false, H),
        (2.3, 80, 3, 1, false, H),
        (2.3, 80, 3, 1, false, H),
        (6.0, 112, 3, 1, true, H),
        (6.0, 112, 3, 1, true, H),
        (6.0, 160, 5, 2, true, H),
        (6.0, 160, 5, 1, true, H),
        (6.0, 160, 5, 1, true, H),
    ];
    let cfg = if large { large_cfg } else { small };
    for (id, &(e, f, k, s, se, a)) in cfg.iter().enumerate() {
        x = v3.block(x, e, make_divisible(f as f64, 8), k, s, se, a, id);
    }
    let last_conv = make_divisible(v3.n.channels(x) as f64 * 6.0, 8);
    let last_point = if large { 1280 } else { 1024 };
    x = v3.n.conv(x, "Conv_1", last_conv, 1, 1, Same, false);
    x = v3.n.bn_with(x, "Conv_1/BatchNorm", 1e-3, 0.999, true);
    x = v3.activation(x, H);
    x = v3.n.conv(x, "Conv_2", last_point, 1, 1, Same, true);
    x = v3.activation(x, H);
    n.build(x)
}

struct BlockArgs {
    kernel: usize,
    repeats: usize,
    filters_in: usize,
    filters_out: usize,
    expand: usize,
    stride: usize,
}

const EFFICIENT_BLOCKS: [BlockArgs; 7] = [
    BlockArgs { kernel: 3, repeats: 1, filters_in: 32, filters_out: 16, expand: 1, stride: 1 },
    BlockArgs { kernel: 3, repeats: 2, filters_in: 16, filters_out: 24, expand: 6, stride: 2 },
    BlockArgs { kernel: 5, repeats: 2, filters_in: 24, filters_out: 40, expand: 6, stride: 2 },
    BlockArgs { kernel: 3, repeats: 3, filters_in: 40, filters_out: 80, expand: 6, stride: 2 },
    BlockArgs { kernel: 5, repeats: 3, filters_in: 80, filters_out: 112, expand: 6, stride: 1 },
    BlockArgs { kernel: 5, repeats: 4, filters_in: 112, filters_out: 192, expand: 6, stride: 2 },
    BlockArgs { kernel: 3, repeats: 1, filters_in: 192, filters_out: 320, expand: 6, stride: 1 },
];

pub(crate) fn efficientnet(size: usize, width: f64, depth: f64) -> Graph {
    let round_filters = |f: usize| make_divisible(f as f64 * width, 8);
    let round_repeats = |r: usize| (depth * r as f64).ceil() as usize;
    let swish = Activation::Swish;
    let mut n = Net::new();
    let input = n.input(size);
    let mut x = n.op(Op::Rescale { scale: 1.0 / 255.0, offset: 0.0 }, &[input], "");
    x = n.op(Op::Normalize, &[x], "");
    let [_, h, w] = n.shape(x);
    x = n.pad(x, "stem_conv_pad", correct_pad(h, w, 3));
    x = n.conv(x, "stem_conv", round_filters(32), 3, 2, Valid, false);
    x = n.bn(x, "stem_bn", 1e-3);
    x = n.act(x, "stem_activation", swish);
    let total: usize = EFFICIENT_BLOCKS.iter().map(|b| round_repeats(b.repeats)).sum();
    let mut b = 0;
    for (i, args) in EFFICIENT_BLOCKS.iter().enumerate() {
        for j in 0..round_repeats(args.repeats) {
            let (filters_in, stride) = if j == 0 {
                (round_filters(args.filters_in), args.stride)
            } else {
                (round_filters(args.filters_out), 1)
            };
            let filters_out = round_filters(args.filters_out);
            let name = format!("block{}{}_", i + 1, (b'a' + j as u8) as char);
            let drop = 0.2 * b as f32 / total as f32;
            let inputs = x;
            let filters = filters_in * args.expand;
            let mut y = x;
            if args.expand != 1 {
                y = n.conv(y, &format!("{name}expand_conv"), filters, 1, 1, Same, false);
                y = n.bn(y, &format!("{name}expand_bn"), 1e-3);
                y = n.act(y, &format!("{name}expand_activation"), swish);
            }
            let pad = if stride == 2 {
                let [_, h, w] = n.shape(y);
                y = n.pad(y, &format!("{name}dwconv_pad"), correct_pad(h, w, args.kernel));
                Valid
            } else {
                Same
            };
            y = n.depthwise(y, &format!("{name}dwconv"), args.kernel, stride, pad);
            y = n.bn(y, &format!("{name}bn"), 1e-3);
            y = n.act(y, &format!("{name}activation"), swish);
            let filters_se = 1.max(filters_in / 4);
            let mut se = n.gap(y, &format!("{name}se_squeeze"));
            se = n.reshape(se, &format!("{name}se_reshape"));
            se = n.conv_full(se, &format!("{name}se_reduce"), filters_se, (1, 1), 1, Same, true, swish);
            se = n.conv_full(se, &format!("{name}se_expand"), filters, (1, 1), 1, Same, true, Activation::Sigmoid);
            y = n.multiply(&[y, se], &format!("{name}se_excite"));
            y = n.conv(y, &format!("{name}project_conv"), filters_out, 1, 1, Same, false);
            y = n.bn(y, &format!("{name}project_bn"), 1e-3);
            if stride == 1 && filters_in == filters_out {
                if drop > 0.0 {
                    y = n.op(Op::Dropout { rate: drop, per_sample: true }, &[y], &format!("{name}drop"));
                }
                y = n.add(&[y, inputs], &format!("{name}add"));
            }
            x = y;
            b += 1;
        }
    }
    x = n.conv(x, "top_conv", round_filters(1280), 1, 1, Same, false);
    x = n.bn(x, "top_bn", 1e-3);
    x = n.act(x, "top_activation", swish);
    n.build(x)
}
