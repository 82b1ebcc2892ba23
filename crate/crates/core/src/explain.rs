//! Grad-CAM heatmaps and overlays.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::nn::{exec, BackwardOptions, Graph, Model, NodeId, Op, Tensor};
use crate::transfer::{prepare_image, Classifier};
use crate::{Error, Result};

/// Opacity of the colour-mapped heatmap in an overlay.
pub const OVERLAY_ALPHA: f64 = 0.4;

/// Layers used instead of auto-detection, keyed by backbone name. VGG
/// backbones end in a max pool; the last convolution keeps twice the
/// resolution.
pub const LAYER_OVERRIDES: &[(&str, &str)] = &[("VGG16", "block5_conv3"), ("VGG19", "block5_conv4")];

/// A max-normalized class activation map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major, values in [0, 1].
    pub grid: Vec<f64>,
    pub source_layer: String,
    pub target_class: usize,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.grid[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.grid.iter().all(|&v| v == 0.0)
    }

    /// Rectifies and max-normalizes a raw map.
    pub fn from_raw(height: usize, width: usize, raw: Vec<f64>, source_layer: String, target_class: usize) -> Heatmap {
        let mut grid: Vec<f64> = raw.into_iter().map(|v| v.max(0.0)).collect();
        let m = grid.iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            grid.iter_mut().for_each(|v| *v /= m);
        }
        Heatmap {
            height,
            width,
            grid,
            source_layer,
            target_class,
        }
    }

    /// One line per row, comma separated.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.grid.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, source_layer: &str, target_class: usize) -> Result<Heatmap> {
        let mut grid = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("heatmap row {}: {e}", i + 1)))?;
            if *width.get_or_insert(row.len()) != row.len() {
                return Err(Error::invalid(format!("heatmap row {} has {} cells", i + 1, row.len())));
            }
            grid.extend(row);
            height += 1;
        }
        Ok(Heatmap {
            height,
            width: width.unwrap_or(0),
            grid,
            source_layer: source_layer.to_string(),
            target_class,
        })
    }
}

/// Input of the last global pooling (the head's pooling for a classifier),
/// or the last convolution when the graph has no global pooling.
pub fn final_conv_layer(graph: &Graph) -> Result<NodeId> {
    let layer = match graph.nodes.iter().rposition(|n| matches!(n.op, Op::GlobalAvgPool)) {
        Some(gap) => graph.nodes[gap].inputs[0],
        None => graph
            .nodes
            .iter()
            .rposition(|n| n.op.is_convolution())
            .ok_or_else(|| Error::invalid("model has no convolutional layer"))?,
    };
    if !graph.nodes[..=layer].iter().any(|n| n.op.is_convolution()) {
        return Err(Error::invalid("model has no convolutional layer"));
    }
    Ok(layer)
}

/// Override table first, then auto-detection.
pub fn resolve_layer(graph: &Graph, backbone: Option<&str>) -> Result<NodeId> {
    if let Some((_, name)) = backbone.and_then(|b| LAYER_OVERRIDES.iter().find(|(k, _)| *k == b)) {
        if let Some(id) = graph.find(name) {
            return Ok(id);
        }
    }
    final_conv_layer(graph)
}

/// Grad-CAM for one input sample. With a single sigmoid output, class 1
/// scores `p` and class 0 scores `1 - p`; with several outputs the score is
/// the target unit.
pub fn grad_cam(model: &Model, input: &Tensor, target_class: usize, layer: NodeId) -> Result<Heatmap> {
    let want = model.graph.input_shape();
    if input.batch() != 1 || [input.dims[1], input.dims[2], input.dims[3]] != want {
        return Err(Error::invalid(format!(
            "grad-cam input {:?} does not match model input 1x{}x{}x{}",
            input.dims, want[0], want[1], want[2]
        )));
    }
    let units = model.graph.output_shape()[0];
    let classes = units.max(2);
    if target_class >= classes {
        return Err(Error::invalid(format!("target class {target_class} out of range for {classes} classes")));
    }
    let [c, h, w] = model.graph.nodes[layer].shape;
    let trace = model.forward(input.clone(), false, 0, true);
    let mut seed = Tensor::zeros([1, units, 1, 1]);
    if units == 1 {
        seed.data[0] = if target_class == 1 { 1.0 } else { -1.0 };
    } else {
        seed.data[target_class] = 1.0;
    }
    let frozen = vec![false; model.graph.len()];
    let opts = BackwardOptions {
        trainable: &frozen,
        capture: Some(layer),
        seed_is_pre_activation: false,
    };
    let grads = exec::backward(&model.graph, &model.params, &trace, seed, &opts);
    let plane = h * w;
    let acts = trace.acts[layer].as_ref().expect("full trace");
    let mut raw = vec![0.0f64; plane];
    if let Some(g) = grads.captured {
        for k in 0..c {
            let gk = &g.data[k * plane..(k + 1) * plane];
            let alpha = gk.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            if alpha == 0.0 {
                continue;
            }
            for (r, &a) in raw.iter_mut().zip(&acts.data[k * plane..(k + 1) * plane]) {
                *r += alpha * a as f64;
            }
        }
    }
    Ok(Heatmap::from_raw(h, w, raw, model.graph.nodes[layer].name.clone(), target_class))
}

/// Bilinear resize with half-pixel centres and clamped edges.
pub fn upsample(h: &Heatmap, out_w: usize, out_h: usize) -> Vec<f64> {
    let coord = |i: usize, src: usize, dst: usize| {
        let s = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(src - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h.height, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, h.width, out_w);
            let top = h.at(y0, x0) * (1.0 - fx) + h.at(y0, x1) * fx;
            let bottom = h.at(y1, x0) * (1.0 - fx) + h.at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Jet colormap on [0, 1].
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |centre: f64| (1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0) * 255.0;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Heatmap upsampled to the image size, jet-coloured and blended at
/// [`OVERLAY_ALPHA`].
pub fn overlay(h: &Heatmap, image: &RgbImage) -> RgbImage {
    let (w, ht) = (image.width() as usize, image.height() as usize);
    let up = upsample(h, w, ht);
    let mut out = RgbImage::new(image.width(), image.height());
    for (x, y, p) in out.enumerate_pixels_mut() {
        let src = image.get_pixel(x, y);
        let col = jet(up[y as usize * w + x as usize]);
        *p = Rgb(std::array::from_fn(|c| {
            ((1.0 - OVERLAY_ALPHA) * src[c] as f64 + OVERLAY_ALPHA * col[c]).round().clamp(0.0, 255.0) as u8
        }));
    }
    out
}

/// Explanation of one image by a trained classifier.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub heatmap: Heatmap,
    pub probability: f64,
    pub overlay: RgbImage,
}

/// Explains `image` for `target` (the predicted class when `None`).
pub fn explain_image(c: &Classifier, backbone: &str, image: &RgbImage, target: Option<usize>) -> Result<Explanation> {
    let size = c.input_size();
    let x = Tensor::from_vec([1, 3, size, size], prepare_image(image, size, c.preprocess));
    let probability = c.model.forward(x.clone(), false, 0, false).take_output(&c.model.graph).data[0] as f64;
    let target = target.unwrap_or(usize::from(probability >= 0.5));
    let layer = resolve_layer(&c.model.graph, Some(backbone))?;
    let heatmap = grad_cam(&c.model, &x, target, layer)?;
    let overlay = overlay(&heatmap, image);
    Ok(Explanation {
        heatmap,
        probability,
        overlay,
    })
}

/// Writes `<image_id>_cam.png` and `<image_id>_cam.csv`; `/` in ids become `__`.
pub fn write_explanation(dir: &Path, image_id: &str, e: &Explanation) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let stem = image_id.replace('/', "__");
    let png = dir.join(format!("{stem}_cam.png"));
    let csv = dir.join(format!("{stem}_cam.csv"));
    e.overlay.save(&png).map_err(|err| Error::Image {
        path: png.clone(),
        message: err.to_string(),
    })?;
    std::fs::write(&csv, e.heatmap.to_csv()).map_err(|err| Error::io(&csv, err))?;
    Ok((png, csv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Conv2d, Dense, GraphBuilder, Padding};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(act: Activation, seed: u64) -> Model {
        let mut b = GraphBuilder::new();
        let x = b.input([2, 6, 5]);
        let c = b.node(
            Op::Conv(Conv2d {
                filters: 3,
                kernel: (3, 3),
                stride: (1, 1),
                padding: Padding::Valid,
                bias: true,
                activation: act,
            }),
            &[x],
            Some("conv".into()),
        );
        let g = b.node(Op::GlobalAvgPool, &[c], Some("gap".into()));
        let d = b.node(
            Op::Dense(Dense {
                units: 1,
                bias: true,
                activation: Activation::Sigmoid,
            }),
            &[g],
            Some("out".into()),
        );
        let mut m = Model::init(b.build(d), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.params.iter_mut().flatten() {
            p.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        m
    }

    /// Hand-rolled conv -> GAP -> sigmoid: dp/dA_k = p(1-p) w_k / HW.
    fn toy_oracle(m: &Model, x: &[f32], class: usize, relu: bool) -> Vec<f64> {
        let (cin, h, w, oh, ow, f) = (2, 6, 5, 4, 3, 3);
        let kern = &m.params[1][0];
        let bias = &m.params[1][1];
        let mut acts = vec![0.0f64; f * oh * ow];
        for k in 0..f {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = bias[k] as f64;
                    for ci in 0..cin {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let wv = kern[((k * cin + ci) * 3 + dy) * 3 + dx] as f64;
                                s += wv * x[(ci * h + y + dy) * w + xx + dx] as f64;
                            }
                        }
                    }
                    acts[(k * oh + y) * ow + xx] = if relu { s.max(0.0) } else { s };
                }
            }
        }
        let dw = &m.params[3][0];
        let db = m.params[3][1][0] as f64;
        let plane = (oh * ow) as f64;
        let z: f64 = db + (0..f).map(|k| dw[k] as f64 * acts[k * oh * ow..(k + 1) * oh * ow].iter().sum::<f64>() / plane).sum::<f64>();
        let p = 1.0 / (1.0 + (-z).exp());
        let sign = if class == 1 { 1.0 } else { -1.0 };
        let mut raw = vec![0.0; oh * ow];
        for k in 0..f {
            let alpha = sign * p * (1.0 - p) * dw[k] as f64 / plane;
            for i in 0..oh * ow {
                raw[i] += alpha * acts[k * oh * ow + i];
            }
        }
        Heatmap::from_raw(oh, ow, raw, String::new(), class).grid
    }

    #[test]
    fn toy_model_matches_hand_computation() {
        for (seed, act) in [(1, Activation::Linear), (2, Activation::Relu), (3, Activation::Linear), (4, Activation::Relu)] {
            let m = toy(act, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x: Vec<f32> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let layer = final_conv_layer(&m.graph).unwrap();
            assert_eq!(m.graph.nodes[layer].name, "conv");
            for class in [0, 1] {
                let h = grad_cam(&m, &Tensor::from_vec([1, 2, 6, 5], x.clone()), class, layer).unwrap();
                assert_eq!((h.height, h.width), (4, 3));
                let want = toy_oracle(&m, &x, class, act == Activation::Relu);
                for (a, b) in h.grid.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn nonpositive_map_is_all_zero() {
        let h = Heatmap::from_raw(2, 2, vec![-1.0, 0.0, -0.5, -3.0], "l".into(), 1);
        assert!(h.is_zero());
        let h = Heatmap::from_raw(2, 2, vec![-1.0, 2.0, 0.5, 4.0], "l".into(), 1);
        assert_eq!(h.grid, vec![0.0, 0.5, 0.125, 1.0]);
    }

    #[test]
    fn resnet50_grid_is_seven_by_seven() {
        let (backbone, entry) = crate::transfer::build_backbone("ResNet50", None, None, 1).unwrap();
        let c = crate::transfer::attach_head(backbone, &Default::default(), entry.preprocess, 2).unwrap();
        let layer = resolve_layer(&c.model.graph, Some("ResNet50")).unwrap();
        assert_eq!(c.model.graph.nodes[layer].name, "conv5_block3_out");
        assert_eq!(&c.model.graph.nodes[layer].shape[1..], &[7, 7]);
    }

    #[test]
    fn overrides_name_real_layers() {
        for (backbone, layer) in LAYER_OVERRIDES {
            let g = crate::zoo::entry(backbone).unwrap().graph();
            assert!(g.find(layer).is_some(), "{backbone} has no {layer}");
        }
    }

    #[test]
    fn graph_without_convolution_is_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.input([3, 4, 4]);
        let g = b.node(Op::GlobalAvgPool, &[x], None);
        assert!(final_conv_layer(&b.build(g)).is_err());
    }

    #[test]
    fn zero_heatmap_overlay_is_uniform_blend() {
        let img = RgbImage::from_fn(10, 8, |x, y| Rgb([(x * 20) as u8, (y * 30) as u8, 77]));
        let h = Heatmap::from_raw(2, 3, vec![0.0; 6], "l".into(), 0);
        let o = overlay(&h, &img);
        assert_eq!(o.dimensions(), (10, 8));
        for (x, y, p) in o.enumerate_pixels() {
            let s = img.get_pixel(x, y);
            let zero = [0.0, 0.0, 127.5];
            for c in 0..3 {
                assert_eq!(p[c], (0.6 * s[c] as f64 + 0.4 * zero[c]).round() as u8);
            }
        }
    }

    #[test]
    fn single_hot_cell_peaks_inside_its_footprint() {
        for (r, c) in [(0, 0), (3, 5), (6, 6), (2, 1)] {
            let mut raw = vec![0.0; 49];
            raw[r * 7 + c] = 1.0;
            let h = Heatmap::from_raw(7, 7, raw, "l".into(), 1);
            let up = upsample(&h, 224, 224);
            let best = up.iter().copied().fold(f64::MIN, f64::max);
            let img = RgbImage::new(224, 224);
            let o = overlay(&h, &img);
            for (i, &v) in up.iter().enumerate() {
                if v == best {
                    let (y, x) = (i / 224, i % 224);
                    assert!((r * 32..(r + 1) * 32).contains(&y) && (c * 32..(c + 1) * 32).contains(&x));
                    assert_eq!(o.get_pixel(x as u32, y as u32)[0], (0.4 * jet(v)[0]).round() as u8);
                }
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let h = Heatmap::from_raw(2, 3, vec![0.1, 0.2, 0.3, 0.0, 1.0, 1.0 / 3.0], "layer".into(), 1);
        assert_eq!(Heatmap::from_csv(&h.to_csv(), "layer", 1).unwrap(), h);
    }

    #[test]
    fn repeated_calls_are_identical() {
        let m = toy(Activation::Relu, 9);
        let x = Tensor::from_vec([1, 2, 6, 5], (0..60).map(|i| (i as f32 * 0.37).sin()).collect());
        let layer = final_conv_layer(&m.graph).unwrap();
        assert_eq!(grad_cam(&m, &x, 1, layer).unwrap(), grad_cam(&m, &x, 1, layer).unwrap());
    }
}
