use super::net::{correct_pad, Net, Same, Valid};
use crate::nn::{Graph, NodeId, Pad4};

const EPS: f32 = 1e-3;
const MOMENTUM: f32 = 0.9997;

fn bn(n: &mut Net, x: NodeId, name: &str) -> NodeId {
    n.bn_with(x, name, EPS, MOMENTUM, true)
}

fn sep_block(n: &mut Net, x: NodeId, filters: usize, k: usize, stride: usize, id: &str) -> NodeId {
    let mut y = n.relu(x, "");
    let pad = if stride == 2 {
        let s = n.shape(y);
        y = n.pad(y, &format!("separable_conv_1_pad_{id}"), correct_pad(s[1], s[2], k));
        Valid
    } else {
        Same
    };
    y = n.separable(y, &format!("separable_conv_1_{id}"), filters, k, stride, pad);
    y = bn(n, y, &format!("separable_conv_1_bn_{id}"));
    y = n.relu(y, "");
    y = n.separable(y, &format!("separable_conv_2_{id}"), filters, k, 1, Same);
    bn(n, y, &format!("separable_conv_2_bn_{id}"))
}

fn adjust(n: &mut Net, p: Option<NodeId>, ip: NodeId, filters: usize, id: &str) -> NodeId {
    let Some(p) = p else { return ip };
    if n.shape(p)[2] != n.shape(ip)[2] {
        let p = n.relu(p, &format!("adjust_relu_1_{id}"));
        let mut p1 = n.avg_pool(p, &format!("adjust_avg_pool_1_{id}"), 1, 2, Valid);
        p1 = n.conv(p1, &format!("adjust_conv_1_{id}"), filters / 2, 1, 1, Same, false);
        let mut p2 = n.pad(p, "", Pad4 { top: 0, bottom: 1, left: 0, right: 1 });
        p2 = n.crop(p2, "", Pad4 { top: 1, bottom: 0, left: 1, right: 0 });
        p2 = n.avg_pool(p2, &format!("adjust_avg_pool_2_{id}"), 1, 2, Valid);
        p2 = n.conv(p2, &format!("adjust_conv_2_{id}"), filters / 2, 1, 1, Same, false);
        let cat = n.concat(&[p1, p2], "");
        bn(n, cat, &format!("adjust_bn_{id}"))
    } else if n.channels(p) != filters {
        let mut p = n.relu(p, "");
        p = n.conv(p, &format!("adjust_conv_projection_{id}"), filters, 1, 1, Same, false);
        bn(n, p, &format!("adjust_bn_{id}"))
    } else {
        p
    }
}

fn normal_cell(n: &mut Net, ip: NodeId, p: Option<NodeId>, filters: usize, id: &str) -> (NodeId, NodeId) {
    let p = adjust(n, p, ip, filters, id);
    let mut h = n.relu(ip, "");
    h = n.conv(h, &format!("normal_conv_1_{id}"), filters, 1, 1, Same, false);
    h = bn(n, h, &format!("normal_bn_1_{id}"));

    let a = sep_block(n, h, filters, 5, 1, &format!("normal_left1_{id}"));
    let b = sep_block(n, p, filters, 3, 1, &format!("normal_right1_{id}"));
    let x1 = n.add(&[a, b], &format!("normal_add_1_{id}"));

    let a = sep_block(n, p, filters, 5, 1, &format!("normal_left2_{id}"));
    let b = sep_block(n, p, filters, 3, 1, &format!("normal_right2_{id}"));
    let x2 = n.add(&[a, b], &format!("normal_add_2_{id}"));

    let a = n.avg_pool(h, &format!("normal_left3_{id}"), 3, 1, Same);
    let x3 = n.add(&[a, p], &format!("normal_add_3_{id}"));

    let a = n.avg_pool(p, &format!("normal_left4_{id}"), 3, 1, Same);
    let b = n.avg_pool(p, &format!("normal_right4_{id}"), 3, 1, Same);
    let x4 = n.add(&[a, b], &format!("normal_add_4_{id}"));

    let a = sep_block(n, h, filters, 3, 1, &format!("normal_left5_{id}"));
    let x5 = n.add(&[a, h], &format!("normal_add_5_{id}"));

    let x = n.concat(&[p, x1, x2, x3, x4, x5], &format!("normal_concat_{id}"));
    (x, ip)
}

fn reduction_cell(n: &mut Net, ip: NodeId, p: Option<NodeId>, filters: usize, id: &str) -> (NodeId, NodeId) {
    let p = adjust(n, p, ip, filters, id);
    let mut h = n.relu(ip, "");
    h = n.conv(h, &format!("reduction_conv_1_{id}"), filters, 1, 1, Same, false);
    h = bn(n, h, &format!("reduction_bn_1_{id}"));
    let s = n.shape(h);
    let h3 = n.pad(h, &format!("reduction_pad_1_{id}"), correct_pad(s[1], s[2], 3));

    let a = sep_block(n, h, filters, 5, 2, &format!("reduction_left1_{id}"));
    let b = sep_block(n, p, filters, 7, 2, &format!("reduction_right1_{id}"));
    let x1 = n.add(&[a, b], &format!("reduction_add_1_{id}"));

    let a = n.max_pool(h3, &format!("reduction_left2_{id}"), 3, 2, Valid);
    let b = sep_block(n, p, filters, 7, 2, &format!("reduction_right2_{id}"));
    let x2 = n.add(&[a, b], &format!("reduction_add_2_{id}"));

    let a = n.avg_pool(h3, &format!("reduction_left3_{id}"), 3, 2, Valid);
    let b = sep_block(n, p, filters, 5, 2, &format!("reduction_right3_{id}"));
    let x3 = n.add(&[a, b], &format!("reduction_add3_{id}"));

    let a = n.avg_pool(x1, &format!("reduction_left4_{id}"), 3, 1, Same);
    let x4 = n.add(&[x2, a], "");

    let a = sep_block(n, x1, filters, 3, 1, &format!("reduction_left4_{id}"));
    let b = n.max_pool(h3, &format!("reduction_right5_{id}"), 3, 2, Valid);
    let x5 = n.add(&[a, b], &format!("reduction_add4_{id}"));

    let x = n.concat(&[x2, x3, x4, x5], &format!("reduction_concat_{id}"));
    (x, ip)
}

/// NASNet-A Mobile (4 @ 1056).
pub(crate) fn nasnet_mobile(size: usize) -> Graph {
    let blocks = 4;
    let filters = 1056 / 24;
    let mult = 2;
    let mut n = Net::new();
    let input = n.input(size);
    let mut x = n.conv(input, "stem_conv1", 32, 3, 2, Valid, false);
    x = bn(&mut n, x, "stem_bn1");
    let mut p = None;
    let (nx, np) = reduction_cell(&mut n, x, p, filters / (mult * mult), "stem_1");
    (x, p) = (nx, Some(np));
    let (nx, np) = reduction_cell(&mut n, x, p, filters / mult, "stem_2");
    (x, p) = (nx, Some(np));
    for i in 0..blocks {
        let (nx, np) = normal_cell(&mut n, x, p, filters, &i.to_string());
        (x, p) = (nx, Some(np));
    }
    let (nx, np) = reduction_cell(&mut n, x, p, filters * mult, &format!("reduce_{blocks}"));
    (x, p) = (nx, Some(np));
    for i in 0..blocks {
        let (nx, np) = normal_cell(&mut n, x, p, filters * mult, &(blocks + i + 1).to_string());
        (x, p) = (nx, Some(np));
    }
    let (nx, np) = reduction_cell(&mut n, x, p, filters * mult * mult, &format!("reduce_{}", 2 * blocks));
    (x, p) = (nx, Some(np));
    for i in 0..blocks {
        let (nx, np) = normal_cell(&mut n, x, p, filters * mult * mult, &(2 * blocks + i + 1).to_string());
        (x, p) = (nx, Some(np));
    }
    let _ = p;
    x = n.relu(x, "");
    n.build(x)
}
