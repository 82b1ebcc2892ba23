use super::net::{Net, Same, Valid};
use crate::nn::{Activation, Graph, NodeId, Op, Padding};

/// Conv (no bias) + scale-free batch norm + ReLU, auto-named unless `name` is set.
fn conv_bn(n: &mut Net, x: NodeId, filters: usize, kh: usize, kw: usize, stride: usize, pad: Padding, name: &str) -> NodeId {
    let (cn, bn) = if name.is_empty() {
        (String::new(), String::new())
    } else {
        (format!("{name}_conv"), format!("{name}_bn"))
    };
    let y = n.conv_full(x, &cn, filters, (kh, kw), stride, pad, false, Activation::Linear);
    let y = n.bn_with(y, &bn, 1e-3, 0.99, false);
    n.act(y, name, Activation::Relu)
}

fn c(n: &mut Net, x: NodeId, filters: usize, kh: usize, kw: usize) -> NodeId {
    conv_bn(n, x, filters, kh, kw, 1, Same, "")
}

fn c_red(n: &mut Net, x: NodeId, filters: usize, k: usize) -> NodeId {
    conv_bn(n, x, filters, k, k, 2, Valid, "")
}

pub(crate) fn inception_v3(size: usize) -> Graph {
    let mut n = Net::new();
    let input = n.input(size);
    let mut x = conv_bn(&mut n, input, 32, 3, 3, 2, Valid, "");
    x = conv_bn(&mut n, x, 32, 3, 3, 1, Valid, "");
    x = c(&mut n, x, 64, 3, 3);
    x = n.max_pool(x, "", 3, 2, Valid);
    x = conv_bn(&mut n, x, 80, 1, 1, 1, Valid, "");
    x = conv_bn(&mut n, x, 192, 3, 3, 1, Valid, "");
    x = n.max_pool(x, "", 3, 2, Valid);

    for (i, pool_filters) in [32, 64, 64].into_iter().enumerate() {
        let b1 = c(&mut n, x, 64, 1, 1);
        let mut b5 = c(&mut n, x, 48, 1, 1);
        b5 = c(&mut n, b5, 64, 5, 5);
        let mut b3 = c(&mut n, x, 64, 1, 1);
        b3 = c(&mut n, b3, 96, 3, 3);
        b3 = c(&mut n, b3, 96, 3, 3);
        let mut bp = n.avg_pool(x, "", 3, 1, Same);
        bp = c(&mut n, bp, pool_filters, 1, 1);
        x = n.concat(&[b1, b5, b3, bp], &format!("mixed{i}"));
    }

    let b3 = c_red(&mut n, x, 384, 3);
    let mut bd = c(&mut n, x, 64, 1, 1);
    bd = c(&mut n, bd, 96, 3, 3);
    bd = c_red(&mut n, bd, 96, 3);
    let bp = n.max_pool(x, "", 3, 2, Valid);
    x = n.concat(&[b3, bd, bp], "mixed3");

    for (i, mid) in [128, 160, 160, 192].into_iter().enumerate() {
        let b1 = c(&mut n, x, 192, 1, 1);
        let mut b7 = c(&mut n, x, mid, 1, 1);
        b7 = c(&mut n, b7, mid, 1, 7);
        b7 = c(&mut n, b7, 192, 7, 1);
        let mut bd = c(&mut n, x, mid, 1, 1);
        bd = c(&mut n, bd, mid, 7, 1);
        bd = c(&mut n, bd, mid, 1, 7);
        bd = c(&mut n, bd, mid, 7, 1);
        bd = c(&mut n, bd, 192, 1, 7);
        let mut bp = n.avg_pool(x, "", 3, 1, Same);
        bp = c(&mut n, bp, 192, 1, 1);
        x = n.concat(&[b1, b7, bd, bp], &format!("mixed{}", 4 + i));
    }

    let mut b3 = c(&mut n, x, 192, 1, 1);
    b3 = c_red(&mut n, b3, 320, 3);
    let mut b7 = c(&mut n, x, 192, 1, 1);
    b7 = c(&mut n, b7, 192, 1, 7);
    b7 = c(&mut n, b7, 192, 7, 1);
    b7 = c_red(&mut n, b7, 192, 3);
    let bp = n.max_pool(x, "", 3, 2, Valid);
    x = n.concat(&[b3, b7, bp], "mixed8");

    for i in 0..2 {
        let b1 = c(&mut n, x, 320, 1, 1);
        let b3 = c(&mut n, x, 384, 1, 1);
        let b3a = c(&mut n, b3, 384, 1, 3);
        let b3b = c(&mut n, b3, 384, 3, 1);
        let b3 = n.concat(&[b3a, b3b], &format!("mixed9_{i}"));
        let mut bd = c(&mut n, x, 448, 1, 1);
        bd = c(&mut n, bd, 384, 3, 3);
        let bda = c(&mut n, bd, 384, 1, 3);
        let bdb = c(&mut n, bd, 384, 3, 1);
        let bd = n.concat(&[bda, bdb], "");
        let mut bp = n.avg_pool(x, "", 3, 1, Same);
        bp = c(&mut n, bp, 192, 1, 1);
        x = n.concat(&[b1, b3, bd, bp], &format!("mixed{}", 9 + i));
    }
    n.build(x)
}

/// Conv with bias (no batch norm), used for the residual projections.
fn conv_bias(n: &mut Net, x: NodeId, filters: usize, name: &str) -> NodeId {
    n.conv(x, name, filters, 1, 1, Same, true)
}

fn resnet_block(n: &mut Net, x: NodeId, scale: f32, kind: &str, idx: usize, activate: bool) -> NodeId {
    let branches = match kind {
        "block35" => {
            let b0 = c(n, x, 32, 1, 1);
            let mut b1 = c(n, x, 32, 1, 1);
            b1 = c(n, b1, 32, 3, 3);
            let mut b2 = c(n, x, 32, 1, 1);
            b2 = c(n, b2, 48, 3, 3);
            b2 = c(n, b2, 64, 3, 3);
            vec![b0, b1, b2]
        }
        "block17" => {
            let b0 = c(n, x, 192, 1, 1);
            let mut b1 = c(n, x, 128, 1, 1);
            b1 = c(n, b1, 160, 1, 7);
            b1 = c(n, b1, 192, 7, 1);
            vec![b0, b1]
        }
        _ => {
            let b0 = c(n, x, 192, 1, 1);
            let mut b1 = c(n, x, 192, 1, 1);
            b1 = c(n, b1, 224, 1, 3);
            b1 = c(n, b1, 256, 3, 1);
            vec![b0, b1]
        }
    };
    let name = format!("{kind}_{idx}");
    let mixed = n.concat(&branches, &format!("{name}_mixed"));
    let channels = n.channels(x);
    let up = conv_bias(n, mixed, channels, &format!("{name}_conv"));
    let y = n.op(Op::ScaledSum { scale }, &[x, up], &name);
    if activate {
        n.act(y, &format!("{name}_ac"), Activation::Relu)
    } else {
        y
    }
}

pub(crate) fn inception_resnet_v2(size: usize) -> Graph {
    let mut n = Net::new();
    let input = n.input(size);
    let mut x = c_red(&mut n, input, 32, 3);
    x = conv_bn(&mut n, x, 32, 3, 3, 1, Valid, "");
    x = c(&mut n, x, 64, 3, 3);
    x = n.max_pool(x, "", 3, 2, Valid);
    x = conv_bn(&mut n, x, 80, 1, 1, 1, Valid, "");
    x = conv_bn(&mut n, x, 192, 3, 3, 1, Valid, "");
    x = n.max_pool(x, "", 3, 2, Valid);

    let b0 = c(&mut n, x, 96, 1, 1);
    let mut b1 = c(&mut n, x, 48, 1, 1);
    b1 = c(&mut n, b1, 64, 5, 5);
    let mut b2 = c(&mut n, x, 64, 1, 1);
    b2 = c(&mut n, b2, 96, 3, 3);
    b2 = c(&mut n, b2, 96, 3, 3);
    let mut bp = n.avg_pool(x, "", 3, 1, Same);
    bp = c(&mut n, bp, 64, 1, 1);
    x = n.concat(&[b0, b1, b2, bp], "mixed_5b");
    for i in 1..=10 {
        x = resnet_block(&mut n, x, 0.17, "block35", i, true);
    }

    let b0 = c_red(&mut n, x, 384, 3);
    let mut b1 = c(&mut n, x, 256, 1, 1);
    b1 = c(&mut n, b1, 256, 3, 3);
    b1 = c_red(&mut n, b1, 384, 3);
    let bp = n.max_pool(x, "", 3, 2, Valid);
    x = n.concat(&[b0, b1, bp], "mixed_6a");
    for i in 1..=20 {
        x = resnet_block(&mut n, x, 0.1, "block17", i, true);
    }

    let mut b0 = c(&mut n, x, 256, 1, 1);
    b0 = c_red(&mut n, b0, 384, 3);
    let mut b1 = c(&mut n, x, 256, 1, 1);
    b1 = c_red(&mut n, b1, 288, 3);
    let mut b2 = c(&mut n, x, 256, 1, 1);
    b2 = c(&mut n, b2, 288, 3, 3);
    b2 = c_red(&mut n, b2, 320, 3);
    let bp = n.max_pool(x, "", 3, 2, Valid);
    x = n.concat(&[b0, b1, b2, bp], "mixed_7a");
    for i in 1..=9 {
        x = resnet_block(&mut n, x, 0.2, "block8", i, true);
    }
    x = resnet_block(&mut n, x, 1.0, "block8", 10, false);
    x = conv_bn(&mut n, x, 1536, 1, 1, 1, Same, "conv_7b");
    n.build(x)
}

/// Conv (no bias) + batch norm without scale, auto-named, for InceptionV4.
fn v4(n: &mut Net, x: NodeId, filters: usize, kh: usize, kw: usize, stride: usize, pad: Padding) -> NodeId {
    let y = n.conv_full(x, "", filters, (kh, kw), stride, pad, false, Activation::Linear);
    let y = n.bn_with(y, "", 1e-3, 0.9997, false);
    n.act(y, "", Activation::Relu)
}

pub(crate) fn inception_v4(size: usize) -> Graph {
    let mut n = Net::new();
    let input = n.input(size);
    let mut x = v4(&mut n, input, 32, 3, 3, 2, Valid);
    x = v4(&mut n, x, 32, 3, 3, 1, Valid);
    x = v4(&mut n, x, 64, 3, 3, 1, Same);
    let b0 = n.max_pool(x, "", 3, 2, Valid);
    let b1 = v4(&mut n, x, 96, 3, 3, 2, Valid);
    x = n.concat(&[b0, b1], "");

    let mut b0 = v4(&mut n, x, 64, 1, 1, 1, Same);
    b0 = v4(&mut n, b0, 96, 3, 3, 1, Valid);
    let mut b1 = v4(&mut n, x, 64, 1, 1, 1, Same);
    b1 = v4(&mut n, b1, 64, 1, 7, 1, Same);
    b1 = v4(&mut n, b1, 64, 7, 1, 1, Same);
    b1 = v4(&mut n, b1, 96, 3, 3, 1, Valid);
    x = n.concat(&[b0, b1], "");

    let b0 = v4(&mut n, x, 192, 3, 3, 2, Valid);
    let b1 = n.max_pool(x, "", 3, 2, Valid);
    x = n.concat(&[b0, b1], "");

    for _ in 0..4 {
        let b0 = v4(&mut n, x, 96, 1, 1, 1, Same);
        let mut b1 = v4(&mut n, x, 64, 1, 1, 1, Same);
        b1 = v4(&mut n, b1, 96, 3, 3, 1, Same);
        let mut b2 = v4(&mut n, x, 64, 1, 1, 1, Same);
        b2 = v4(&mut n, b2, 96, 3, 3, 1, Same);
        b2 = v4(&mut n, b2, 96, 3, 3, 1, Same);
        let mut b3 = n.avg_pool(x, "", 3, 1, Same);
        b3 = v4(&mut n, b3, 96, 1, 1, 1, Same);
        x = n.concat(&[b0, b1, b2, b3], "");
    }

    let b0 = v4(&mut n, x, 384, 3, 3, 2, Valid);
    let mut b1 = v4(&mut n, x, 192, 1, 1, 1, Same);
    b1 = v4(&mut n, b1, 224, 3, 3, 1, Same);
    b1 = v4(&mut n, b1, 256, 3, 3, 2, Valid);
    let b2 = n.max_pool(x, "", 3, 2, Valid);
    x = n.concat(&[b0, b1, b2], "");

    for _ in 0..7 {
        let b0 = v4(&mut n, x, 384, 1, 1, 1, Same);
        let mut b1 = v4(&mut n, x, 192, 1, 1, 1, Same);
        b1 = v4(&mut n, b1, 224, 1, 7, 1, Same);
        b1 = v4(&mut n, b1, 256, 7, 1, 1, Same);
        let mut b2 = v4(&mut n, x, 192, 1, 1, 1, Same);
        b2 = v4(&mut n, b2, 192, 7, 1, 1, Same);
        b2 = v4(&mut n, b2, 224, 1, 7, 1, Same);
        b2 = v4(&mut n, b2, 224, 7, 1, 1, Same);
        b2 = v4(&mut n, b2, 256, 1, 7, 1, Same);
        let mut b3 = n.avg_pool(x, "", 3, 1, Same);
        b3 = v4(&mut n, b3, 128, 1, 1, 1, Same);
        x = n.concat(&[b0, b1, b2, b3], "");
    }

    let mut b0 = v4(&mut n, x, 192, 1, 1, 1, Same);
    b0 = v4(&mut n, b0, 192, 3, 3, 2, Valid);
    let mut b1 = v4(&mut n, x, 256, 1, 1, 1, Same);
    b1 = v4(&mut n, b1, 256, 1, 7, 1, Same);
    b1 = v4(&mut n, b1, 320, 7, 1, 1, Same);
    b1 = v4(&mut n, b1, 320, 3, 3, 2, Valid);
    let b2 = n.max_pool(x, "", 3, 2, Valid);
    x = n.concat(&[b0, b1, b2], "");

    for _ in 0..3 {
        let b0 = v4(&mut n, x, 256, 1, 1, 1, Same);
        let b1 = v4(&mut n, x, 384, 1, 1, 1, Same);
        let b10 = v4(&mut n, b1, 256, 1, 3, 1, Same);
        let b11 = v4(&mut n, b1, 256, 3, 1, 1, Same);
        let b1 = n.concat(&[b10, b11], "");
        let mut b2 = v4(&mut n, x, 384, 1, 1, 1, Same);
        b2 = v4(&mut n, b2, 448, 3, 1, 1, Same);
        b2 = v4(&mut n, b2, 512, 1, 3, 1, Same);
        let b20 = v4(&mut n, b2, 256, 1, 3, 1, Same);
        let b21 = v4(&mut n, b2, 256, 3, 1, 1, Same);
        let b2 = n.concat(&[b20, b21], "");
        let mut b3 = n.avg_pool(x, "", 3, 1, Same);
        b3 = v4(&mut n, b3, 256, 1, 1, 1, Same);
        x = n.concat(&[b0, b1, b2, b3], "");
    }
    n.build(x)
}

pub(crate) fn xception(size: usize) -> Graph {
    let mut n = Net::new();
    let input = n.input(size);
    let mut x = n.conv(input, "block1_conv1", 32, 3, 2, Valid, false);
    x = n.bn(x, "block1_conv1_bn", 1e-3);
    x = n.relu(x, "block1_conv1_act");
    x = n.conv(x, "block1_conv2", 64, 3, 1, Valid, false);
    x = n.bn(x, "block1_conv2_bn", 1e-3);
    x = n.relu(x, "block1_conv2_act");

    for (b, width) in [(2, 128), (3, 256), (4, 728)] {
        let mut residual = n.conv(x, "", width, 1, 2, Same, false);
        residual = n.bn(residual, "", 1e-3);
        let mut y = x;
        if b > 2 {
            y = n.relu(y, &format!("block{b}_sepconv1_act"));
        }
        y = n.separable(y, &format!("block{b}_sepconv1"), width, 3, 1, Same);
        y = n.bn(y, &format!("block{b}_sepconv1_bn"), 1e-3);
        y = n.relu(y, &format!("block{b}_sepconv2_act"));
        y = n.separable(y, &format!("block{b}_sepconv2"), width, 3, 1, Same);
        y = n.bn(y, &format!("block{b}_sepconv2_bn"), 1e-3);
        y = n.max_pool(y, &format!("block{b}_pool"), 3, 2, Same);
        x = n.add(&[y, residual], "");
    }

    for b in 5..13 {
        let residual = x;
        let mut y = x;
        for s in 1..=3 {
            y = n.relu(y, &format!("block{b}_sepconv{s}_act"));
            y = n.separable(y, &format!("block{b}_sepconv{s}"), 728, 3, 1, Same);
            y = n.bn(y, &format!("block{b}_sepconv{s}_bn"), 1e-3);
        }
        x = n.add(&[y, residual], "");
    }

    let mut residual = n.conv(x, "", 1024, 1, 2, Same, false);
    residual = n.bn(residual, "", 1e-3);
    let mut y = n.relu(x, "block13_sepconv1_act");
    y = n.separable(y, "block13_sepconv1", 728, 3, 1, Same);
    y = n.bn(y, "block13_sepconv1_bn", 1e-3);
    y = n.relu(y, "block13_sepconv2_act");
    y = n.separable(y, "block13_sepconv2", 1024, 3, 1, Same);
    y = n.bn(y, "block13_sepconv2_bn", 1e-3);
    y = n.max_pool(y, "block13_pool", 3, 2, Same);
    x = n.add(&[y, residual], "");

    x = n.separable(x, "block14_sepconv1", 1536, 3, 1, Same);
    x = n.bn(x, "block14_sepconv1_bn", 1e-3);
    x = n.relu(x, "block14_sepconv1_act");
    x = n.separable(x, "block14_sepconv2", 2048, 3, 1, Same);
    x = n.bn(x, "block14_sepconv2_bn", 1e-3);
    x = n.relu(x, "block14_sepconv2_act");
    n.build(x)
}
