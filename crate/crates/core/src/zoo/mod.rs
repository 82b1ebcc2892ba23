//! Backbone registry: 23 ImageNet feature extractors with their canonical
//! layer lists, input sizes and preprocessing.

mod inception;
mod mobile;
mod nasnet;
mod net;
mod resnet;

use serde::{Deserialize, Serialize};

use crate::nn::Graph;
use crate::{Error, Result};

/// Input normalization a backbone expects on 0..255 RGB pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocess {
    /// RGB to BGR, then subtract the ImageNet channel means.
    Caffe,
    /// Scale to [0,1], then standardize with ImageNet mean/std.
    Torch,
    /// Scale to [-1,1].
    Tf,
    /// The network rescales internally; feed raw pixels.
    Raw,
}

impl Preprocess {
    /// Normalizes one CHW RGB image in place.
    pub fn apply(self, chw: &mut [f32], plane: usize) {
        match self {
            Preprocess::Caffe => {
                const MEAN_BGR: [f32; 3] = [103.939, 116.779, 123.68];
                let (r, rest) = chw.split_at_mut(plane);
                let b = &mut rest[plane..2 * plane];
                r.swap_with_slice(b);
                for (c, m) in MEAN_BGR.iter().enumerate() {
                    chw[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v -= m);
                }
            }
            Preprocess::Torch => {
                const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
                const STD: [f32; 3] = [0.229, 0.224, 0.225];
                for c in 0..3 {
                    chw[c * plane..(c + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v = (*v / 255.0 - MEAN[c]) / STD[c]);
                }
            }
            Preprocess::Tf => chw.iter_mut().for_each(|v| *v = *v / 127.5 - 1.0),
            Preprocess::Raw => {}
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    None,
    Imagenet,
}

/// Static facts about one registry entry.
#[derive(Clone, Copy, Debug)]
pub struct Entry {
    pub name: &'static str,
    pub input_size: usize,
    pub preprocess: Preprocess,
    /// Unfreeze depth of the best reported fine-tuning configuration.
    pub reference_u: usize,
    build: fn(usize) -> Graph,
}

macro_rules! entry {
    ($name:literal, $size:literal, $pre:ident, $u:literal, $build:expr) => {
        Entry {
            name: $name,
            input_size: $size,
            preprocess: Preprocess::$pre,
            reference_u: $u,
            build: $build,
        }
    };
}

pub const REGISTRY: [Entry; 23] = [
    entry!("VGG16", 224, Caffe, 8, |s| resnet::vgg(s, [2, 2, 3, 3, 3])),
    entry!("VGG19", 224, Caffe, 13, |s| resnet::vgg(s, [2, 2, 4, 4, 4])),
    entry!("ResNet50", 224, Caffe, 141, |s| resnet::resnet(s, [3, 4, 6, 3], false)),
    entry!("ResNet101", 224, Caffe, 150, |s| resnet::resnet(s, [3, 4, 23, 3], false)),
    entry!("ResNet50V2", 224, Tf, 105, |s| resnet::resnet(s, [3, 4, 6, 3], true)),
    entry!("ResNet101V2", 224, Tf, 233, |s| resnet::resnet(s, [3, 4, 23, 3], true)),
    entry!("InceptionV3", 224, Tf, 274, inception::inception_v3),
    entry!("InceptionV4", 299, Tf, 327, inception::inception_v4),
    entry!("InceptionResNetV2", 299, Tf, 500, inception::inception_resnet_v2),
    entry!("Xception", 299, Tf, 118, inception::xception),
    entry!("DenseNet121", 224, Torch, 379, |s| resnet::densenet(s, [6, 12, 24, 16])),
    entry!("DenseNet169", 224, Torch, 395, |s| resnet::densenet(s, [6, 12, 32, 32])),
    entry!("DenseNet201", 224, Torch, 561, |s| resnet::densenet(s, [6, 12, 48, 32])),
    entry!("MobileNetV2", 224, Tf, 62, mobile::mobilenet_v2),
    entry!("MobileNetV3Small", 224, Raw, 182, |s| mobile::mobilenet_v3(s, false)),
    entry!("MobileNetV3Large", 224, Raw, 193, |s| mobile::mobilenet_v3(s, true)),
    entry!("NASNetMobile", 224, Tf, 617, nasnet::nasnet_mobile),
    entry!("EfficientNetB0", 224, Raw, 187, |s| mobile::efficientnet(s, 1.0, 1.0)),
    entry!("EfficientNetB1", 240, Raw, 308, |s| mobile::efficientnet(s, 1.0, 1.1)),
    entry!("EfficientNetB2", 260, Raw, 316, |s| mobile::efficientnet(s, 1.1, 1.2)),
    entry!("EfficientNetB3", 300, Raw, 194, |s| mobile::efficientnet(s, 1.2, 1.4)),
    entry!("EfficientNetB4", 380, Raw, 384, |s| mobile::efficientnet(s, 1.4, 1.8)),
    entry!("EfficientNetB5", 456, Raw, 444, |s| mobile::efficientnet(s, 1.6, 2.2)),
];

pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|e| e.name).collect()
}

/// Looks up a registry entry by exact name.
pub fn entry(name: &str) -> Result<&'static Entry> {
    REGISTRY.iter().find(|e| e.name == name).ok_or_else(|| Error::UnknownBackbone {
        name: name.to_string(),
        valid: names().join(", "),
    })
}

impl Entry {
    /// Feature extractor at the canonical input size.
    pub fn graph(&self) -> Graph {
        (self.build)(self.input_size)
    }

    /// Feature extractor at an arbitrary square input size.
    pub fn graph_at(&self, size: usize) -> Graph {
        (self.build)(size)
    }

    pub fn descriptor(&self, weight_source: WeightSource) -> BackboneDescriptor {
        self.describe(&self.graph(), weight_source)
    }

    pub fn describe(&self, graph: &Graph, weight_source: WeightSource) -> BackboneDescriptor {
        let [c, h, w] = graph.input_shape();
        BackboneDescriptor {
            name: self.name.to_string(),
            input_shape: [h, w, c],
            total_layers: graph.len(),
            feature_channels: graph.output_shape()[0],
            weight_source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub name: String,
    /// H, W, channels.
    pub input_shape: [usize; 3],
    /// Layers in the canonical flattened list, input layer included.
    pub total_layers: usize,
    pub feature_channels: usize,
    pub weight_source: WeightSource,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_lists_valid_names() {
        let err = entry("ResNet49").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ResNet49") && msg.contains("EfficientNetB5"));
    }

    #[test]
    fn caffe_swaps_to_bgr_and_centers() {
        let mut px = vec![10.0, 20.0, 30.0];
        Preprocess::Caffe.apply(&mut px, 1);
        assert_eq!(px, vec![30.0 - 103.939, 20.0 - 116.779, 10.0 - 123.68]);
    }
}
