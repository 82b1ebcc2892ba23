//! Synthetic blob-vs-ring images for smoke tests and calibration runs.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::path::Path;

use crate::data::{dhash, ImageRecord, Manifest, NEGATIVE, POSITIVE};
use crate::nn::{weights, Activation, Dense, Op};
use crate::transfer::{
    build_backbone, calibrate_batch_norm, train_epochs, Dataset, Pixels, Prepared, Sample, TrainingHyperparams,
};
use crate::{Error, Result};

/// Pixel bounding box, inclusive-exclusive: `(x0, y0, x1, y1)`.
pub type BBox = (u32, u32, u32, u32);

#[derive(Clone, Debug)]
pub struct ShapeImage {
    pub image: RgbImage,
    /// 1 for a filled blob, 0 for a ring.
    pub label: u8,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outline {
    Disc,
    Square,
    Diamond,
}

impl Outline {
    /// Whether offset `(dx, dy)` lies inside the outline of radius `r`.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            Outline::Disc => dx * dx + dy * dy <= r * r,
            Outline::Square => dx.abs().max(dy.abs()) <= r,
            Outline::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

/// A filled or hollow shape on a noisy background; `label` is 1 when filled.
/// Radii span 0.22 to 0.28 of the canvas and hollow shapes keep the outer
/// quarter of the radius, so every filled shape covers more pixels than any
/// hollow one of the same outline and the classes are linearly separable.
pub fn draw_shape(size: u32, outline: Outline, filled: bool, rng: &mut impl Rng) -> ShapeImage {
    let r = rng.gen_range(0.22..0.28) * size as f32;
    let margin = r + 1.0;
    let cx = rng.gen_range(margin..size as f32 - margin);
    let cy = rng.gen_range(margin..size as f32 - margin);
    let inner = 0.75 * r;
    let mut img = RgbImage::new(size, size);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
        let inside = outline.contains(dx, dy, r) && (filled || !outline.contains(dx, dy, inner));
        let noise: i16 = rng.gen_range(-12..=12);
        let v = |base: i16| (base + noise).clamp(0, 255) as u8;
        *p = if inside { Rgb([v(210), v(60), v(50)]) } else { Rgb([v(90), v(90), v(100)]) };
    }
    let bbox = (
        (cx - r).floor().max(0.0) as u32,
        (cy - r).floor().max(0.0) as u32,
        ((cx + r).ceil() as u32).min(size),
        ((cy + r).ceil() as u32).min(size),
    );
    ShapeImage {
        image: img,
        label: u8::from(filled),
        bbox,
    }
}

/// A filled disc (`blob = true`) or a ring.
pub fn shape_image(size: u32, blob: bool, rng: &mut impl Rng) -> ShapeImage {
    draw_shape(size, Outline::Disc, blob, rng)
}

/// Four-class proxy set (filled/hollow squares and diamonds) with no discs,
/// used to pretrain stand-in backbone weights.
pub fn proxy_dataset(n: usize, size: u32, seed: u64) -> Dataset {
    let classes = [
        (Outline::Square, true),
        (Outline::Square, false),
        (Outline::Diamond, true),
        (Outline::Diamond, false),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset {
        samples: (0..n)
            .map(|i| {
                let (o, filled) = classes[i % classes.len()];
                Sample {
                    id: format!("proxy_{i:04}"),
                    pixels: Pixels::Memory(draw_shape(size, o, filled, &mut rng).image),
                    label: i % classes.len(),
                }
            })
            .collect(),
        class_names: ["square", "hollow_square", "diamond", "hollow_diamond"].map(String::from).to_vec(),
    }
}

/// Writes stand-in "pretrained" weights for a registry backbone: seeded
/// initialization, `epochs` epochs of full training on the proxy set at
/// learning rate `lr`, then batch-norm statistics recalibrated on proxy
/// images. Returns per-epoch (loss, accuracy).
pub fn standin_weights(name: &str, size: usize, epochs: usize, lr: f32, seed: u64, out: &Path) -> Result<Vec<(f64, f64)>> {
    let (mut model, entry) = build_backbone(name, Some(size), None, seed)?;
    let proxy = proxy_dataset(256, size as u32, seed);
    let prepared = Prepared::new(&proxy, size, entry.preprocess)?;
    let calib: Vec<usize> = (0..proxy.len().min(64)).collect();
    calibrate_batch_norm(&mut model, prepared.batch(&calib)?);
    let n = model.graph.len();
    model.push("proxy_gap", Op::GlobalAvgPool, seed);
    model.push(
        "proxy_logits",
        Op::Dense(Dense {
            units: proxy.classes(),
            bias: true,
            activation: Activation::Softmax,
        }),
        seed.wrapping_add(1),
    );
    let log = train_epochs(&mut model, &prepared, proxy.classes(), lr, epochs, &TrainingHyperparams::default(), seed)?;
    model.truncate(n, n - 1);
    calibrate_batch_norm(&mut model, prepared.batch(&calib)?);
    weights::save(&model, out)?;
    Ok(log)
}

/// `n` images alternating blob/ring, deterministic in `seed`.
pub fn shapes(n: usize, size: u32, seed: u64) -> Vec<ShapeImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| shape_image(size, i % 2 == 0, &mut rng)).collect()
}

/// In-memory binary dataset (label 1 = blob).
pub fn shape_dataset(n: usize, size: u32, seed: u64) -> Dataset {
    Dataset {
        samples: shapes(n, size, seed)
            .into_iter()
            .enumerate()
            .map(|(i, s)| Sample {
                id: format!("shape_{i:04}"),
                pixels: Pixels::Memory(s.image),
                label: s.label as usize,
            })
            .collect(),
        class_names: vec!["ring".into(), "blob".into()],
    }
}

/// Writes `n` shapes as PNGs under `dir/EM` (blobs) and `dir/Confuser`
/// (rings) and returns their manifest.
pub fn write_shape_manifest(dir: &Path, n: usize, size: u32, seed: u64) -> Result<Manifest> {
    let mut records = Vec::with_capacity(n);
    for (i, s) in shapes(n, size, seed).into_iter().enumerate() {
        let class = if s.label == 1 { POSITIVE } else { NEGATIVE };
        let class_dir = dir.join(class);
        std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        let path = class_dir.join(format!("shape_{i:04}.png"));
        s.image.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
        records.push(ImageRecord {
            id: format!("{class}/shape_{i:04}"),
            phash: dhash(&image::DynamicImage::ImageRgb8(s.image)),
            path,
            label: class.to_string(),
            source: "synthetic".into(),
        });
    }
    Ok(Manifest::new(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_contains_all_shape_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for blob in [true, false] {
            let s = shape_image(48, blob, &mut rng);
            let (x0, y0, x1, y1) = s.bbox;
            for (x, y, p) in s.image.enumerate_pixels() {
                if p[0] > 150 {
                    assert!(x >= x0 && x < x1 && y >= y0 && y < y1);
                }
            }
        }
    }
}
