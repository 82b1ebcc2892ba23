use super::net::{Net, Same, Valid};
use crate::nn::{Activation, Graph, NodeId, Pad4};

pub(crate) fn vgg(size: usize, convs_per_block: [usize; 5]) -> Graph {
    let mut n = Net::new();
    let mut x = n.input(size);
    let widths = [64, 128, 256, 512, 512];
    for (b, (&reps, &w)) in convs_per_block.iter().zip(&widths).enumerate() {
        for c in 0..reps {
            let name = format!("block{}_conv{}", b + 1, c + 1);
            x = n.conv_full(x, &name, w, (3, 3), 1, Same, true, Activation::Relu);
        }
        x = n.max_pool(x, &format!("block{}_pool", b + 1), 2, 2, Valid);
    }
    n.build(x)
}

const EPS: f32 = 1.001e-5;

fn block_v1(n: &mut Net, x: NodeId, filters: usize, stride: usize, conv_shortcut: bool, name: &str) -> NodeId {
    let shortcut = if conv_shortcut {
        let s = n.conv(x, &format!("{name}_0_conv"), 4 * filters, 1, stride, Valid, true);
        n.bn(s, &format!("{name}_0_bn"), EPS)
    } else {
        x
    };
    let mut y = n.conv(x, &format!("{name}_1_conv"), filters, 1, stride, Valid, true);
    y = n.bn(y, &format!("{name}_1_bn"), EPS);
    y = n.relu(y, &format!("{name}_1_relu"));
    y = n.conv(y, &format!("{name}_2_conv"), filters, 3, 1, Same, true);
    y = n.bn(y, &format!("{name}_2_bn"), EPS);
    y = n.relu(y, &format!("{name}_2_relu"));
    y = n.conv(y, &format!("{name}_3_conv"), 4 * filters, 1, 1, Valid, true);
    y = n.bn(y, &format!("{name}_3_bn"), EPS);
    let sum = n.add(&[shortcut, y], &format!("{name}_add"));
    n.relu(sum, &format!("{name}_out"))
}

fn block_v2(n: &mut Net, x: NodeId, filters: usize, stride: usize, conv_shortcut: bool, name: &str) -> NodeId {
    let mut pre = n.bn(x, &format!("{name}_preact_bn"), EPS);
    pre = n.relu(pre, &format!("{name}_preact_relu"));
    let shortcut = if conv_shortcut {
        n.conv(pre, &format!("{name}_0_conv"), 4 * filters, 1, stride, Valid, true)
    } else if stride > 1 {
        n.max_pool(x, "", 1, stride, Valid)
    } else {
        x
    };
    let mut y = n.conv(pre, &format!("{name}_1_conv"), filters, 1, 1, Valid, false);
    y = n.bn(y, &format!("{name}_1_bn"), EPS);
    y = n.relu(y, &format!("{name}_1_relu"));
    y = n.pad(y, &format!("{name}_2_pad"), Pad4::uniform(1));
    y = n.conv(y, &format!("{name}_2_conv"), filters, 3, stride, Valid, false);
    y = n.bn(y, &format!("{name}_2_bn"), EPS);
    y = n.relu(y, &format!("{name}_2_relu"));
    y = n.conv(y, &format!("{name}_3_conv"), 4 * filters, 1, 1, Valid, true);
    n.add(&[shortcut, y], &format!("{name}_out"))
}

/// ResNet (v1) or ResNetV2 with the given blocks per stage.
pub(crate) fn resnet(size: usize, blocks: [usize; 4], preact: bool) -> Graph {
    let mut n = Net::new();
    let input = n.input(size);
    let mut x = n.pad(input, "conv1_pad", Pad4::uniform(3));
    x = n.conv(x, "conv1_conv", 64, 7, 2, Valid, true);
    if !preact {
        x = n.bn(x, "conv1_bn", EPS);
        x = n.relu(x, "conv1_relu");
    }
    x = n.pad(x, "pool1_pad", Pad4::uniform(1));
    x = n.max_pool(x, "pool1_pool", 3, 2, Valid);
    let filters = [64, 128, 256, 512];
    for (s, (&reps, &f)) in blocks.iter().zip(&filters).enumerate() {
        let stage = format!("conv{}", s + 2);
        if preact {
            let last_stride = if s == 3 { 1 } else { 2 };
            x = block_v2(&mut n, x, f, 1, true, &format!("{stage}_block1"));
            for b in 2..reps {
                x = block_v2(&mut n, x, f, 1, false, &format!("{stage}_block{b}"));
            }
            x = block_v2(&mut n, x, f, last_stride, false, &format!("{stage}_block{reps}"));
        } else {
            let stride = if s == 0 { 1 } else { 2 };
            x = block_v1(&mut n, x, f, stride, true, &format!("{stage}_block1"));
            for b in 2..=reps {
                x = block_v1(&mut n, x, f, 1, false, &format!("{stage}_block{b}"));
            }
        }
    }
    if preact {
        x = n.bn(x, "post_bn", EPS);
        x = n.relu(x, "post_relu");
    }
    n.build(x)
}

pub(crate) fn densenet(size: usize, blocks: [usize; 4]) -> Graph {
    let mut n = Net::new();
    let input = n.input(size);
    let mut x = n.pad(input, "", Pad4::uniform(3));
    x = n.conv(x, "conv1_conv", 64, 7, 2, Valid, false);
    x = n.bn(x, "conv1_bn", EPS);
    x = n.relu(x, "conv1_relu");
    x = n.pad(x, "", Pad4::uniform(1));
    x = n.max_pool(x, "pool1", 3, 2, Valid);
    for (s, &reps) in blocks.iter().enumerate() {
        let stage = format!("conv{}", s + 2);
        for b in 1..=reps {
            let name = format!("{stage}_block{b}");
            let mut y = n.bn(x, &format!("{name}_0_bn"), EPS);
            y = n.relu(y, &format!("{name}_0_relu"));
            y = n.conv(y, &format!("{name}_1_conv"), 128, 1, 1, Valid, false);
            y = n.bn(y, &format!("{name}_1_bn"), EPS);
            y = n.relu(y, &format!("{name}_1_relu"));
            y = n.conv(y, &format!("{name}_2_conv"), 32, 3, 1, Same, false);
            x = n.concat(&[x, y], &format!("{name}_concat"));
        }
        if s < 3 {
            let name = format!("pool{}", s + 2);
            x = n.bn(x, &format!("{name}_bn"), EPS);
            x = n.relu(x, &format!("{name}_relu"));
            let c = n.channels(x) / 2;
            x = n.conv(x, &format!("{name}_conv"), c, 1, 1, Valid, false);
            x = n.avg_pool(x, &format!("{name}_pool"), 2, 2, Valid);
        }
    }
    x = n.bn(x, "bn", EPS);
    x = n.relu(x, "relu");
    n.build(x)
}
