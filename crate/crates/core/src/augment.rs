//! Stochastic augmentation recipe and twenty-fold training-set expansion.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_image, Manifest};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OpKind {
    /// Horizontal or vertical mirror, chosen evenly.
    FlipLrOrUd,
    SmallRotation { max_deg: f32 },
    /// One of 90, 180, 270 degrees.
    RightAngleRotation,
    Brightness { min_f: f32, max_f: f32 },
    Contrast { min_f: f32, max_f: f32 },
    Saturation { min_f: f32, max_f: f32 },
    /// Corners displaced inward by up to `magnitude` of the shorter side.
    PerspectiveSkew { magnitude: f32 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::FlipLrOrUd => "flip",
            OpKind::SmallRotation { .. } => "rotate",
            OpKind::RightAngleRotation => "rotate90",
            OpKind::Brightness { .. } => "brightness",
            OpKind::Contrast { .. } => "contrast",
            OpKind::Saturation { .. } => "saturation",
            OpKind::PerspectiveSkew { .. } => "skew",
        }
    }

    fn factor_range(&self) -> Option<(f32, f32)> {
        match *self {
            OpKind::Brightness { min_f, max_f } | OpKind::Contrast { min_f, max_f } | OpKind::Saturation { min_f, max_f } => {
                Some((min_f, max_f))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugOp {
    pub kind: OpKind,
    pub probability: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub ops: Vec<AugOp>,
    pub expansion_factor: usize,
}

impl AugmentationSpec {
    /// Seven op families at probability 0.5, 5 degree small rotations,
    /// factors in [0.7, 1.3], 10% skew, twenty replicas per image.
    pub fn standard() -> AugmentationSpec {
        let p = 0.5;
        let f = (0.7, 1.3);
        let op = |kind| AugOp { kind, probability: p };
        AugmentationSpec {
            ops: vec![
                op(OpKind::FlipLrOrUd),
                op(OpKind::SmallRotation { max_deg: 5.0 }),
                op(OpKind::RightAngleRotation),
                op(OpKind::Brightness { min_f: f.0, max_f: f.1 }),
                op(OpKind::Contrast { min_f: f.0, max_f: f.1 }),
                op(OpKind::Saturation { min_f: f.0, max_f: f.1 }),
                op(OpKind::PerspectiveSkew { magnitude: 0.1 }),
            ],
            expansion_factor: 20,
        }
    }

    pub fn with_probability(mut self, p: f32) -> AugmentationSpec {
        self.ops.iter_mut().for_each(|o| o.probability = p);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.expansion_factor < 1 {
            return Err(Error::invalid("expansion_factor must be at least 1"));
        }
        for op in &self.ops {
            if !(0.0..=1.0).contains(&op.probability) {
                return Err(Error::invalid(format!("{}: probability {} outside [0,1]", op.kind.name(), op.probability)));
            }
            if let Some((lo, hi)) = op.kind.factor_range() {
                if !(lo > 0.0 && lo <= hi) {
                    return Err(Error::invalid(format!("{}: bad factor range [{lo}, {hi}]", op.kind.name())));
                }
            }
        }
        Ok(())
    }
}

/// One drawn operation, e.g. `brightness=1.1732`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub kind: &'static str,
    pub value: String,
}

pub fn format_draws(draws: &[Draw]) -> String {
    let mut s = String::new();
    for (i, d) in draws.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(s, "{}={}", d.kind, d.value);
    }
    s
}

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn flip_lr(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

pub fn flip_ud(img: &RgbImage) -> RgbImage {
    image::imageops::flip_vertical(img)
}

/// Every channel scaled by `f` and clamped.
pub fn brightness(img: &RgbImage, f: f32) -> RgbImage {
    let mut out = img.clone();
    out.pixels_mut().for_each(|p| p.0 = p.0.map(|c| clamp_u8(c as f32 * f)));
    out
}

fn luma(p: &Rgb<u8>) -> f32 {
    0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
}

/// Pixels pushed away from (or toward) the mean luminance by `f`.
pub fn contrast(img: &RgbImage, f: f32) -> RgbImage {
    let n = (img.width() * img.height()).max(1) as f32;
    let mean = img.pixels().map(luma).sum::<f32>() / n;
    let mut out = img.clone();
    out.pixels_mut().for_each(|p| p.0 = p.0.map(|c| clamp_u8(mean + f * (c as f32 - mean))));
    out
}

/// Each pixel interpolated between its own luminance and itself by `f`.
pub fn saturation(img: &RgbImage, f: f32) -> RgbImage {
    let mut out = img.clone();
    out.pixels_mut().for_each(|p| {
        let g = luma(p);
        p.0 = p.0.map(|c| clamp_u8(g + f * (c as f32 - g)));
    });
    out
}

fn reflect(v: f32, n: u32) -> f32 {
    let max = (n - 1) as f32;
    if max == 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    let m = v.rem_euclid(period);
    if m > max {
        period - m
    } else {
        m
    }
}

fn bilinear(img: &RgbImage, x: f32, y: f32) -> [u8; 3] {
    let x = reflect(x, img.width());
    let y = reflect(y, img.height());
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
    let px = |xx, yy| img.get_pixel(xx, yy).0.map(|c| c as f32);
    let (a, b, c, d) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
    std::array::from_fn(|k| {
        let top = a[k] + fx * (b[k] - a[k]);
        let bot = c[k] + fx * (d[k] - c[k]);
        clamp_u8(top + fy * (bot - top))
    })
}

/// Resamples `img` on its own canvas; `map` takes an output pixel centre to
/// a source position. Out-of-canvas reads reflect.
fn warp(img: &RgbImage, map: impl Fn(f32, f32) -> (f32, f32)) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let (sx, sy) = map(x as f32, y as f32);
        Rgb(bilinear(img, sx, sy))
    })
}

/// Rotation by `deg` (counter-clockwise) about the centre, same canvas,
/// reflection-filled corners.
pub fn rotate_small(img: &RgbImage, deg: f32) -> RgbImage {
    let (s, c) = deg.to_radians().sin_cos();
    let cx = (img.width() as f32 - 1.0) / 2.0;
    let cy = (img.height() as f32 - 1.0) / 2.0;
    warp(img, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    })
}

pub fn rotate_right_angle(img: &RgbImage, deg: u32) -> RgbImage {
    match deg {
        90 => image::imageops::rotate90(img),
        180 => image::imageops::rotate180(img),
        270 => image::imageops::rotate270(img),
        _ => img.clone(),
    }
}

/// Solves the 8-unknown homography taking `from[i]` to `to[i]`.
fn homography(from: [(f32, f32); 4], to: [(f32, f32); 4]) -> [f64; 9] {
    let mut a = [[0f64; 9]; 8];
    for i in 0..4 {
        let (x, y) = (from[i].0 as f64, from[i].1 as f64);
        let (u, v) = (to[i].0 as f64, to[i].1 as f64);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let piv = (col..8).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..8 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..9 {
                    a[r][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [0f64; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    h[8] = 1.0;
    h
}

/// Perspective warp that pulls each canvas corner from `corners` (top-left,
/// top-right, bottom-right, bottom-left) in the source.
pub fn perspective(img: &RgbImage, corners: [(f32, f32); 4]) -> RgbImage {
    let (w, h) = ((img.width() - 1) as f32, (img.height() - 1) as f32);
    let canvas = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let m = homography(canvas, corners);
    warp(img, |x, y| {
        let (x, y) = (x as f64, y as f64);
        let d = m[6] * x + m[7] * y + m[8];
        (((m[0] * x + m[1] * y + m[2]) / d) as f32, ((m[3] * x + m[4] * y + m[5]) / d) as f32)
    })
}

/// Applies each op in order with its probability, recording what was drawn.
pub fn apply_once<R: Rng>(img: &RgbImage, spec: &AugmentationSpec, rng: &mut R) -> (RgbImage, Vec<Draw>) {
    let mut out = img.clone();
    let mut draws = Vec::new();
    for op in &spec.ops {
        // always consume the coin so op streams stay aligned across specs
        let coin: f32 = rng.gen();
        if coin >= op.probability {
            continue;
        }
        let kind = op.kind.name();
        let value = match op.kind {
            OpKind::FlipLrOrUd => {
                if rng.gen_bool(0.5) {
                    out = flip_lr(&out);
                    "lr".to_string()
                } else {
                    out = flip_ud(&out);
                    "ud".to_string()
                }
            }
            OpKind::SmallRotation { max_deg } => {
                let deg = rng.gen_range(-max_deg..=max_deg);
                out = rotate_small(&out, deg);
                format!("{deg:.4}")
            }
            OpKind::RightAngleRotation => {
                let deg = [90, 180, 270][rng.gen_range(0..3)];
                out = rotate_right_angle(&out, deg);
                deg.to_string()
            }
            OpKind::Brightness { min_f, max_f } => {
                let f = rng.gen_range(min_f..=max_f);
                out = brightness(&out, f);
                format!("{f:.4}")
            }
            OpKind::Contrast { min_f, max_f } => {
                let f = rng.gen_range(min_f..=max_f);
                out = contrast(&out, f);
                format!("{f:.4}")
            }
            OpKind::Saturation { min_f, max_f } => {
                let f = rng.gen_range(min_f..=max_f);
                out = saturation(&out, f);
                format!("{f:.4}")
            }
            OpKind::PerspectiveSkew { magnitude } => {
                let (w, h) = ((out.width() - 1) as f32, (out.height() - 1) as f32);
                let d = magnitude * w.min(h);
                let mut j = || if d > 0.0 { rng.gen_range(0.0..=d) } else { 0.0 };
                let corners = [(j(), j()), (w - j(), j()), (w - j(), h - j()), (j(), h - j())];
                out = perspective(&out, corners);
                corners.iter().map(|(x, y)| format!("{x:.1}:{y:.1}")).collect::<Vec<_>>().join("/")
            }
        };
        draws.push(Draw { kind, value });
    }
    (out, draws)
}

/// Independent stream for one source image: sha256(seed, source id).
pub fn source_rng(seed: u64, source_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(source_id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// One row of the lineage CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub out_path: PathBuf,
    pub source_id: String,
    pub replica: usize,
    pub ops_applied: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentedSet {
    pub items: Vec<Lineage>,
}

impl AugmentedSet {
    pub fn write_lineage(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.items {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_lineage(path: &Path) -> Result<AugmentedSet> {
        let mut r = csv::Reader::from_path(path)?;
        let items = r.deserialize().collect::<std::result::Result<Vec<Lineage>, _>>()?;
        Ok(AugmentedSet { items })
    }
}

/// All replicas of one source, in replica order.
pub fn replicas(img: &RgbImage, source_id: &str, spec: &AugmentationSpec, seed: u64) -> Vec<(RgbImage, Vec<Draw>)> {
    let mut rng = source_rng(seed, source_id);
    (0..spec.expansion_factor).map(|_| apply_once(img, spec, &mut rng)).collect()
}

/// File name stem for an augmented replica; `/` in ids becomes `__`.
pub fn replica_file(source_id: &str, replica: usize) -> String {
    format!("{}_{replica}.png", source_id.replace(['/', '\\'], "__"))
}

/// Expands every training id into `spec.expansion_factor` PNGs under
/// `out_dir` (`<source_id>_<replica>.png`) and returns their lineage.
pub fn expand(train_ids: &[String], manifest: &Manifest, spec: &AugmentationSpec, seed: u64, out_dir: &Path) -> Result<AugmentedSet> {
    spec.validate()?;
    let index = manifest.index();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut items = Vec::with_capacity(train_ids.len() * spec.expansion_factor);
    for id in train_ids {
        let rec = index.get(id.as_str()).ok_or_else(|| Error::MissingIds(vec![id.clone()]))?;
        if !rec.path.is_file() {
            return Err(Error::invalid(format!("image for id {id} missing at {}", rec.path.display())));
        }
        let img = load_image(&rec.path)?.to_rgb8();
        for (replica, (out, draws)) in replicas(&img, id, spec, seed).into_iter().enumerate() {
            let out_path = out_dir.join(replica_file(id, replica));
            out.save(&out_path).map_err(|e| Error::Image {
                path: out_path.clone(),
                message: e.to_string(),
            })?;
            items.push(Lineage {
                out_path,
                source_id: id.clone(),
                replica,
                ops_applied: format_draws(&draws),
            });
        }
    }
    Ok(AugmentedSet { items })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: u8) -> RgbImage {
        RgbImage::from_pixel(4, 3, Rgb([v, v, v]))
    }

    #[test]
    fn standard_spec_shape() {
        let s = AugmentationSpec::standard();
        assert_eq!(s.ops.len(), 7);
        assert!(s.ops.iter().all(|o| o.probability == 0.5));
        assert_eq!(s.expansion_factor, 20);
        assert!(s.ops.iter().any(|o| o.kind == OpKind::SmallRotation { max_deg: 5.0 }));
        s.validate().unwrap();
    }

    #[test]
    fn brightness_oracle_on_mid_gray() {
        let img = gray(128);
        let spec = AugmentationSpec {
            ops: vec![AugOp { kind: OpKind::Brightness { min_f: 1.3, max_f: 1.3 }, probability: 1.0 }],
            expansion_factor: 1,
        };
        let (out, draws) = apply_once(&img, &spec, &mut source_rng(0, "x"));
        assert_eq!(draws[0].value, "1.3000");
        for p in out.pixels() {
            // 128 * 1.3 = 166.4
            assert_eq!(p.0, [166, 166, 166]);
        }
        let (bright, _) = apply_once(&gray(230), &spec, &mut source_rng(0, "x"));
        assert!(bright.pixels().all(|p| p.0 == [255; 3]));
    }

    #[test]
    fn rejects_bad_ranges() {
        let mut s = AugmentationSpec::standard();
        s.ops[3].kind = OpKind::Brightness { min_f: 1.2, max_f: 0.9 };
        assert!(s.validate().is_err());
        let mut s = AugmentationSpec::standard();
        s.ops[0].probability = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = crate::data::tests::smooth_image(17, 11, 2);
        assert_eq!(rotate_small(&img, 0.0), img);
    }

    #[test]
    fn identity_corners_leave_image_unchanged() {
        let img = crate::data::tests::smooth_image(9, 7, 1);
        let out = perspective(&img, [(0.0, 0.0), (8.0, 0.0), (8.0, 6.0), (0.0, 6.0)]);
        assert_eq!(out, img);
    }

    #[test]
    fn lineage_names_are_flat() {
        assert_eq!(replica_file("EM/img1", 3), "EM__img1_3.png");
    }
}
