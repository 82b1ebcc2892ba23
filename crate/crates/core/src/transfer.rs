//! Classifier construction and the seven transfer-learning configurations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentedSet;
use crate::data::{load_image, Manifest, SplitAssignment};
use crate::metrics::PredictionSet;
use crate::nn::{weights, Activation, Adam, Dense, Model, NodeParams, Op, Tensor};
use crate::zoo::{self, BackboneDescriptor, Entry, Preprocess, WeightSource};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "NTL")]
    Ntl,
    #[serde(rename = "HAM_FFT")]
    HamFft,
    #[serde(rename = "IMG_WFT")]
    ImgWft,
    #[serde(rename = "IMG_FFT")]
    ImgFft,
    #[serde(rename = "IMG_FTU")]
    ImgFtu,
    #[serde(rename = "IMG_HAMFP_FTU")]
    ImgHamfpFtu,
    #[serde(rename = "IMG_HAMPP_FTU")]
    ImgHamppFtu,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Ntl,
        Strategy::HamFft,
        Strategy::ImgWft,
        Strategy::ImgFft,
        Strategy::ImgFtu,
        Strategy::ImgHamfpFtu,
        Strategy::ImgHamppFtu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ntl => "NTL",
            Strategy::HamFft => "HAM_FFT",
            Strategy::ImgWft => "IMG_WFT",
            Strategy::ImgFft => "IMG_FFT",
            Strategy::ImgFtu => "IMG_FTU",
            Strategy::ImgHamfpFtu => "IMG_HAMFP_FTU",
            Strategy::ImgHamppFtu => "IMG_HAMPP_FTU",
        }
    }

    pub fn needs_u(self) -> bool {
        matches!(self, Strategy::ImgFtu | Strategy::ImgHamfpFtu | Strategy::ImgHamppFtu)
    }

    pub fn uses_imagenet(self) -> bool {
        !matches!(self, Strategy::Ntl | Strategy::HamFft)
    }

    pub fn uses_intermediate(self) -> bool {
        matches!(self, Strategy::HamFft | Strategy::ImgHamfpFtu | Strategy::ImgHamppFtu)
    }

    /// Phases in execution order.
    pub fn phases(self) -> &'static [Phase] {
        use Phase::*;
        match self {
            Strategy::Ntl => &[FullTrain],
            Strategy::HamFft => &[IntermediateFullPretrain, FullFineTune],
            Strategy::ImgWft => &[HeadTrain],
            Strategy::ImgFft => &[HeadTrain, FullFineTune],
            Strategy::ImgFtu => &[HeadTrain, SuffixFineTune],
            Strategy::ImgHamfpFtu => &[IntermediateFullPretrain, HeadTrain, SuffixFineTune],
            Strategy::ImgHamppFtu => &[PartialIntermediatePretrain, HeadTrain, SuffixFineTune],
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let valid: Vec<_> = Strategy::ALL.iter().map(|s| s.name()).collect();
                Error::invalid(format!("unknown strategy {s:?}; valid: {}", valid.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    FullTrain,
    IntermediateFullPretrain,
    PartialIntermediatePretrain,
    HeadTrain,
    FullFineTune,
    SuffixFineTune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub dropout_rate: f32,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec { dropout_rate: 0.2 }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<usize>,
    pub backbone: BackboneDescriptor,
}

impl TransferConfig {
    pub fn new(strategy: Strategy, u: Option<usize>, backbone: BackboneDescriptor) -> Result<TransferConfig> {
        let cfg = TransferConfig { strategy, u, backbone };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Directory name under `runs/`, e.g. `ResNet50-141-IMG_FTU`.
    pub fn label(&self) -> String {
        match self.u {
            Some(u) => format!("{}-{u}-{}", self.backbone.name, self.strategy),
            None => format!("{}-{}", self.backbone.name, self.strategy),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.backbone.total_layers;
        match (self.strategy.needs_u(), self.u) {
            (true, None) => Err(Error::invalid(format!("strategy {} needs an unfreeze depth U", self.strategy))),
            (false, Some(_)) => Err(Error::invalid(format!("strategy {} takes no unfreeze depth", self.strategy))),
            (true, Some(u)) if u > n => Err(Error::invalid(format!(
                "unfreeze depth {u} exceeds the {n} layers of {}",
                self.backbone.name
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub beta1: f32,
    pub beta2: f32,
    pub lr_head: f32,
    pub lr_finetune: f32,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Cap for a head phase that precedes fine-tuning.
    pub head_max_epochs: usize,
    /// Validation share of the intermediate dataset.
    pub intermediate_val_fraction: f64,
    pub head: HeadSpec,
    /// Training resolution; `None` uses the backbone's native input size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_size: Option<usize>,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            beta1: 0.9,
            beta2: 0.999,
            lr_head: 1e-4,
            lr_finetune: 1e-5,
            batch_size: 32,
            patience: 10,
            max_epochs: 200,
            head_max_epochs: 50,
            intermediate_val_fraction: 0.1,
            head: HeadSpec::default(),
            input_size: None,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.lr_head > 0.0 && self.lr_finetune > 0.0) {
            return bad(format!("learning rates must be positive ({}, {})", self.lr_head, self.lr_finetune));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.head_max_epochs == 0 {
            return bad("patience, batch size and epoch caps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam decays must lie in [0, 1) ({}, {})", self.beta1, self.beta2));
        }
        if !(self.intermediate_val_fraction > 0.0 && self.intermediate_val_fraction < 1.0) {
            return bad(format!("intermediate val fraction {} outside (0, 1)", self.intermediate_val_fraction));
        }
        self.head.validate()
    }
}

// ---------------------------------------------------------------- datasets

#[derive(Clone, Debug)]
pub enum Pixels {
    File(PathBuf),
    Memory(RgbImage),
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub pixels: Pixels,
    pub label: usize,
}

/// Labeled images with `classes` classes (labels `0..classes`).
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Binary set over `ids`; label 1 is the manifest's positive class.
    pub fn from_ids(manifest: &Manifest, ids: &[String]) -> Result<Dataset> {
        let index = manifest.index();
        let mut missing = Vec::new();
        let mut samples = Vec::with_capacity(ids.len());
        for id in ids {
            match index.get(id.as_str()) {
                Some(r) => samples.push(Sample {
                    id: id.clone(),
                    pixels: Pixels::File(r.path.clone()),
                    label: manifest.binary_label(&r.label) as usize,
                }),
                None => missing.push(id.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingIds(missing));
        }
        Ok(Dataset {
            samples,
            class_names: binary_names(manifest),
        })
    }

    /// Training stream: the augmented replicas of `ids` replace their
    /// sources; ids without replicas fall back to the original image.
    pub fn training(manifest: &Manifest, ids: &[String], augmented: &AugmentedSet) -> Result<Dataset> {
        let mut by_source: BTreeMap<&str, Vec<&Path>> = BTreeMap::new();
        for item in &augmented.items {
            by_source.entry(item.source_id.as_str()).or_default().push(&item.out_path);
        }
        let base = Dataset::from_ids(manifest, ids)?;
        let mut samples = Vec::new();
        for s in base.samples {
            match by_source.get(s.id.as_str()) {
                Some(paths) => samples.extend(paths.iter().enumerate().map(|(r, p)| Sample {
                    id: format!("{}#{r}", s.id),
                    pixels: Pixels::File(p.to_path_buf()),
                    label: s.label,
                })),
                None => samples.push(s),
            }
        }
        Ok(Dataset {
            samples,
            class_names: base.class_names,
        })
    }

    /// Multi-class set from `root/<class>/**`, one class per subdirectory in
    /// name order. Undecodable files are skipped.
    pub fn from_class_dirs(root: &Path) -> Result<Dataset> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut ds = Dataset::default();
        for dir in dirs {
            let label = ds.class_names.len();
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            for entry in walkdir::WalkDir::new(&dir).sort_by_file_name() {
                let entry = entry.map_err(|e| Error::io(&dir, e.into()))?;
                if !entry.file_type().is_file() || image::ImageFormat::from_path(entry.path()).is_err() {
                    continue;
                }
                let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
                ds.samples.push(Sample {
                    id: rel.with_extension("").to_string_lossy().replace('\\', "/"),
                    pixels: Pixels::File(entry.path().to_path_buf()),
                    label,
                });
            }
            ds.class_names.push(name);
        }
        if ds.is_empty() {
            return Err(Error::EmptyClass(format!("intermediate dataset {}", root.display())));
        }
        Ok(ds)
    }

    /// Per-class shuffled split; every class with at least two samples keeps
    /// at least one on each side.
    pub fn stratified_split(&self, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Dataset {
            samples: Vec::new(),
            class_names: self.class_names.clone(),
        };
        let mut val = train.clone();
        for c in 0..self.classes() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].label == c).collect();
            idx.shuffle(&mut rng);
            let mut q = (val_fraction * idx.len() as f64).round() as usize;
            if idx.len() >= 2 {
                q = q.clamp(1, idx.len() - 1);
            }
            val.samples.extend(idx[..q].iter().map(|&i| self.samples[i].clone()));
            train.samples.extend(idx[q..].iter().map(|&i| self.samples[i].clone()));
        }
        (train, val)
    }
}

fn binary_names(m: &Manifest) -> Vec<String> {
    // label 0 = negative, label 1 = positive
    vec![m.class_names[1].clone(), m.class_names[0].clone()]
}

/// Resizes to `size`×`size` and returns normalized CHW floats.
pub fn prepare_image(img: &RgbImage, size: usize, pre: Preprocess) -> Vec<f32> {
    let resized;
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        &resized
    };
    let plane = size * size;
    let mut chw = vec![0.0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            chw[c * plane + i] = p[c] as f32;
        }
    }
    pre.apply(&mut chw, plane);
    chw
}

/// A dataset bound to an input size and normalization, cached in memory
/// when small enough.
pub struct Prepared<'a> {
    ds: &'a Dataset,
    size: usize,
    pre: Preprocess,
    cache: Option<Vec<Vec<f32>>>,
}

const CACHE_LIMIT_BYTES: usize = 1 << 30;

impl<'a> Prepared<'a> {
    pub fn new(ds: &'a Dataset, size: usize, pre: Preprocess) -> Result<Prepared<'a>> {
        let mut p = Prepared { ds, size, pre, cache: None };
        if ds.len() * 3 * size * size * 4 <= CACHE_LIMIT_BYTES {
            let cache = (0..ds.len()).map(|i| p.load(i)).collect::<Result<Vec<_>>>()?;
            p.cache = Some(cache);
        }
        Ok(p)
    }

    fn load(&self, i: usize) -> Result<Vec<f32>> {
        let img = match &self.ds.samples[i].pixels {
            Pixels::File(path) => load_image(path)?.to_rgb8(),
            Pixels::Memory(img) => img.clone(),
        };
        Ok(prepare_image(&img, self.size, self.pre))
    }

    pub fn len(&self) -> usize {
        self.ds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ds.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.ds.samples[i].label
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let chw = [3, self.size, self.size];
        match &self.cache {
            Some(c) => {
                let refs: Vec<&[f32]> = idx.iter().map(|&i| c[i].as_slice()).collect();
                Ok(Tensor::stack(&refs, chw))
            }
            None => {
                let owned = idx.iter().map(|&i| self.load(i)).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&[f32]> = owned.iter().map(Vec::as_slice).collect();
                Ok(Tensor::stack(&refs, chw))
            }
        }
    }
}

// ---------------------------------------------------------------- models

/// A backbone (nodes `0..backbone_layers`) followed by the binary head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub model: Model,
    pub backbone_layers: usize,
    pub preprocess: Preprocess,
}

/// Instantiates a registry backbone at `size` (native size when `None`).
/// ImageNet initialization needs a weights file covering every backbone tensor.
pub fn build_backbone(name: &str, size: Option<usize>, weights: Option<&Path>, seed: u64) -> Result<(Model, &'static Entry)> {
    let entry = zoo::entry(name)?;
    let graph = entry.graph_at(size.unwrap_or(entry.input_size));
    let mut model = Model::init(graph, seed);
    if let Some(path) = weights {
        let report = weights::load(&mut model, path)?;
        if !report.missing.is_empty() {
            let shown: Vec<_> = report.missing.iter().take(5).cloned().collect();
            return Err(Error::Weights {
                path: path.to_path_buf(),
                message: format!("{} tensors missing, e.g. {}", report.missing.len(), shown.join(", ")),
            });
        }
    }
    Ok((model, entry))
}

/// Replaces every batch-norm layer's moving statistics with the batch
/// statistics of `x`, layer by layer. Used to give seeded stand-in weights
/// well-scaled activations.
pub fn calibrate_batch_norm(model: &mut Model, x: Tensor) {
    let saved = std::mem::replace(&mut model.trainable, vec![true; model.graph.len()]);
    let trace = model.forward(x, true, 0, false);
    model.trainable = saved;
    for (id, mean, var) in &trace.bn_stats {
        let mi = model.graph.params[*id].iter().position(|s| s.name == "moving_mean").expect("moving mean");
        model.params[*id][mi].clone_from(mean);
        model.params[*id][mi + 1].clone_from(var);
    }
}

/// Appends global average pooling, dropout and a one-unit sigmoid layer.
pub fn attach_head(mut backbone: Model, head: &HeadSpec, preprocess: Preprocess, seed: u64) -> Result<Classifier> {
    head.validate()?;
    let backbone_layers = backbone.graph.len();
    if backbone.graph.output != backbone_layers - 1 {
        return Err(Error::invalid("backbone output must be its last layer"));
    }
    backbone.push("head_gap", Op::GlobalAvgPool, seed);
    backbone.push(
        "head_dropout",
        Op::Dropout {
            rate: head.dropout_rate,
            per_sample: false,
        },
        seed,
    );
    backbone.push(
        "head_dense",
        Op::Dense(Dense {
            units: 1,
            bias: true,
            activation: Activation::Sigmoid,
        }),
        seed,
    );
    Ok(Classifier {
        model: backbone,
        backbone_layers,
        preprocess,
    })
}

impl Classifier {
    /// Registry backbone plus head; errors on an unknown name.
    pub fn build(name: &str, size: Option<usize>, weights: Option<&Path>, head: &HeadSpec, seed: u64) -> Result<Classifier> {
        let (backbone, entry) = build_backbone(name, size, weights, seed)?;
        attach_head(backbone, head, entry.preprocess, seed.wrapping_add(1))
    }

    pub fn input_size(&self) -> usize {
        self.model.graph.input_shape()[1]
    }

    pub fn feature_channels(&self) -> usize {
        self.model.graph.nodes[self.backbone_layers - 1].shape[0]
    }

    pub fn head_params(&self) -> usize {
        (self.backbone_layers..self.model.graph.len()).map(|i| self.model.graph.param_count(i)).sum()
    }

    pub fn backbone_params(&self) -> usize {
        (0..self.backbone_layers).map(|i| self.model.graph.param_count(i)).sum()
    }

    /// Makes the last `u` backbone layers and the head trainable.
    pub fn set_unfrozen_suffix(&mut self, u: usize) -> Result<()> {
        set_suffix(&mut self.model, self.backbone_layers, u)
    }

    pub fn backbone_checksum(&self, layers: std::ops::Range<usize>) -> String {
        self.model.checksum(layers)
    }

    /// Positive-class scores in `[0, 1]`.
    pub fn predict(&self, data: &Prepared, batch: usize) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let x = data.batch(chunk)?;
            let out = self.model.forward(x, false, 0, false).take_output(&self.model.graph);
            scores.extend(out.data.iter().map(|&v| v as f64));
        }
        Ok(scores)
    }
}

/// Freezes layers `0..n-u`; everything after (including nodes past the
/// backbone) trains.
fn set_suffix(model: &mut Model, n: usize, u: usize) -> Result<()> {
    if u > n {
        return Err(Error::invalid(format!("unfreeze depth {u} exceeds the {n} backbone layers")));
    }
    for (i, t) in model.trainable.iter_mut().enumerate() {
        *t = i >= n - u;
    }
    Ok(())
}

// ---------------------------------------------------------------- training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase: Phase,
    pub lr: f32,
    /// Trainable backbone layers during the phase.
    pub unfrozen_layers: usize,
    pub max_epochs: usize,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub history: Vec<EpochRecord>,
}

struct Fit<'a> {
    train: &'a Prepared<'a>,
    val: &'a Prepared<'a>,
    lr: f32,
    max_epochs: usize,
    classes: usize,
}

/// Cross-entropy and accuracy of a sigmoid (one unit) or softmax output.
/// Returns the summed loss, the number correct and the gradient w.r.t. the
/// output pre-activation, scaled by `1/scale`.
fn loss_and_seed(out: &Tensor, labels: &[usize], classes: usize, scale: f32) -> (f64, usize, Tensor) {
    const EPS: f32 = 1e-7;
    let units = out.channels();
    let mut grad = vec![0.0f32; out.data.len()];
    let mut loss = 0.0f64;
    let mut correct = 0;
    for (b, &y) in labels.iter().enumerate() {
        let p = &out.data[b * units..(b + 1) * units];
        if classes == 2 && units == 1 {
            let yf = y as f32;
            let q = p[0].clamp(EPS, 1.0 - EPS);
            loss -= (yf * q.ln() + (1.0 - yf) * (1.0 - q).ln()) as f64;
            correct += usize::from((p[0] >= 0.5) == (y == 1));
            grad[b] = (p[0] - yf) / scale;
        } else {
            loss -= p[y].clamp(EPS, 1.0).ln() as f64;
            let arg = (0..units).fold(0, |a, k| if p[k] > p[a] { k } else { a });
            correct += usize::from(arg == y);
            for k in 0..units {
                grad[b * units + k] = (p[k] - f32::from(k == y)) / scale;
            }
        }
    }
    (loss, correct, Tensor::from_vec(out.dims, grad))
}

fn evaluate_loss(model: &Model, data: &Prepared, batch: usize, classes: usize) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in idx.chunks(batch) {
        let out = model.forward(data.batch(chunk)?, false, 0, false).take_output(&model.graph);
        let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
        let (l, c, _) = loss_and_seed(&out, &labels, classes, 1.0);
        loss += l;
        correct += c;
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Adam on the current trainable set with early stopping on validation
/// accuracy; the best epoch's weights are restored on return.
fn fit(model: &mut Model, f: &Fit, hp: &TrainingHyperparams, seed: u64) -> Result<(Vec<EpochRecord>, usize, usize)> {
    if f.train.is_empty() || f.val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mut adam = Adam::new(hp.beta1, hp.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..f.train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<NodeParams>)> = None;
    let mut step = 0u64;
    let mut stopped = 0;
    for epoch in 0..f.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut correct) = (0.0, 0);
        for chunk in order.chunks(hp.batch_size) {
            let (l, c) = train_step(model, &mut adam, f.train, chunk, f.classes, f.lr, seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
            loss += l;
            correct += c;
            step += 1;
        }
        let (val_loss, val_acc) = evaluate_loss(model, f.val, hp.batch_size, f.classes)?;
        let n = f.train.len() as f64;
        history.push(EpochRecord {
            epoch,
            train_loss: loss / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
        });
        stopped = epoch;
        let improved = best.as_ref().is_none_or(|b| val_acc > b.1);
        if improved {
            best = Some((epoch, val_acc, model.params.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.0) >= hp.patience {
            break;
        }
    }
    let (best_epoch, _, params) = best.expect("at least one epoch");
    model.params = params;
    Ok((history, best_epoch, stopped))
}

/// Plain training for a fixed number of epochs on the current trainable set,
/// without validation or restoration. Returns per-epoch (loss, accuracy).
pub fn train_epochs(model: &mut Model, data: &Prepared, classes: usize, lr: f32, epochs: usize, hp: &TrainingHyperparams, seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut adam = Adam::new(hp.beta1, hp.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(epochs);
    let mut step = 0u64;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let (mut loss, mut correct) = (0.0, 0);
        for chunk in order.chunks(hp.batch_size) {
            let (l, c) = train_step(model, &mut adam, data, chunk, classes, lr, seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
            loss += l;
            correct += c;
            step += 1;
        }
        let n = data.len().max(1) as f64;
        out.push((loss / n, correct as f64 / n));
    }
    Ok(out)
}

fn train_step(model: &mut Model, adam: &mut Adam, data: &Prepared, chunk: &[usize], classes: usize, lr: f32, seed: u64) -> Result<(f64, usize)> {
    let x = data.batch(chunk)?;
    let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
    let trace = model.forward(x, true, seed, true);
    let (l, c, grad) = loss_and_seed(trace.output(&model.graph), &labels, classes, chunk.len() as f32);
    let grads = model.backward(&trace, grad, None, true);
    adam.step(model, &grads, lr);
    model.apply_bn_stats(&trace);
    Ok((l, c))
}

fn run_phase(
    model: &mut Model,
    phase: Phase,
    unfrozen_layers: usize,
    f: Fit,
    hp: &TrainingHyperparams,
    seed: u64,
) -> Result<PhaseLog> {
    let (history, best_epoch, stopped_epoch) = fit(model, &f, hp, seed)?;
    Ok(PhaseLog {
        phase,
        lr: f.lr,
        unfrozen_layers,
        max_epochs: f.max_epochs,
        best_epoch,
        stopped_epoch,
        history,
    })
}

/// Trains the last `u` layers of `backbone` (a bare backbone, output at its
/// last layer) on a multi-class dataset through a temporary softmax head,
/// which is removed again before returning.
pub fn pretrain_partial(
    backbone: &mut Model,
    u: usize,
    data: &Dataset,
    preprocess: Preprocess,
    hp: &TrainingHyperparams,
    seed: u64,
) -> Result<PhaseLog> {
    intermediate_pretrain(backbone, u, Phase::PartialIntermediatePretrain, data, preprocess, hp, seed)
}

fn intermediate_pretrain(
    backbone: &mut Model,
    u: usize,
    phase: Phase,
    data: &Dataset,
    preprocess: Preprocess,
    hp: &TrainingHyperparams,
    seed: u64,
) -> Result<PhaseLog> {
    if data.is_empty() {
        return Err(Error::EmptyClass("intermediate dataset".into()));
    }
    if data.classes() < 2 {
        return Err(Error::invalid("intermediate dataset needs at least two classes"));
    }
    let n = backbone.graph.len();
    let output = backbone.graph.output;
    backbone.push("intermediate_gap", Op::GlobalAvgPool, seed);
    backbone.push(
        "intermediate_logits",
        Op::Dense(Dense {
            units: data.classes(),
            bias: true,
            activation: Activation::Softmax,
        }),
        seed.wrapping_add(1),
    );
    set_suffix(backbone, n, u)?;
    let (train, val) = data.stratified_split(hp.intermediate_val_fraction, seed);
    let size = backbone.graph.input_shape()[1];
    let train = Prepared::new(&train, size, preprocess)?;
    let val = Prepared::new(&val, size, preprocess)?;
    let fit = Fit {
        train: &train,
        val: &val,
        lr: hp.lr_head,
        max_epochs: hp.max_epochs,
        classes: data.classes(),
    };
    let log = run_phase(backbone, phase, u, fit, hp, seed.wrapping_add(2));
    backbone.truncate(n, output);
    log
}

/// Everything one (configuration, fold) run reads.
pub struct RunData<'a> {
    pub manifest: &'a Manifest,
    pub splits: &'a SplitAssignment,
    pub augmented: &'a AugmentedSet,
    pub intermediate: Option<&'a Dataset>,
    /// Exported ImageNet weights for the backbone.
    pub imagenet_weights: Option<&'a Path>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub classifier: Classifier,
    pub config: TransferConfig,
    pub fold: usize,
    /// History of the final phase.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub phases: Vec<PhaseLog>,
}

pub const WEIGHTS_FILE: &str = "weights.tlw";
pub const HISTORY_FILE: &str = "history.csv";
pub const PHASES_FILE: &str = "phases.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const CONFIG_FILE: &str = "config.json";

impl TrainedModel {
    pub fn phase_names(&self) -> Vec<Phase> {
        self.phases.iter().map(|p| p.phase).collect()
    }

    /// Writes weights, history, phase log and configuration into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        weights::save(&self.classifier.model, &dir.join(WEIGHTS_FILE))?;
        write_history(&self.history, &dir.join(HISTORY_FILE))?;
        write_json(&self.phases, &dir.join(PHASES_FILE))?;
        write_json(&self.config, &dir.join(CONFIG_FILE))
    }

    /// Scores the split's test ids.
    pub fn predict_test(&self, data: &RunData, batch: usize) -> Result<PredictionSet> {
        predict_ids(&self.classifier, data.manifest, &data.splits.test_ids, batch)
    }
}

/// Rebuilds the classifier saved by [`TrainedModel::write_artifacts`].
pub fn load_run(dir: &Path) -> Result<(TransferConfig, Classifier)> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: TransferConfig = serde_json::from_str(&text)?;
    let size = cfg.backbone.input_shape[0];
    let mut c = Classifier::build(&cfg.backbone.name, Some(size), None, &HeadSpec::default(), 0)?;
    let path = dir.join(WEIGHTS_FILE);
    let report = weights::load(&mut c.model, &path)?;
    if !report.missing.is_empty() {
        return Err(Error::Weights {
            path,
            message: format!("missing tensors: {}", report.missing.join(", ")),
        });
    }
    Ok((cfg, c))
}

pub fn predict_ids(c: &Classifier, manifest: &Manifest, ids: &[String], batch: usize) -> Result<PredictionSet> {
    let ds = Dataset::from_ids(manifest, ids)?;
    let prepared = Prepared::new(&ds, c.input_size(), c.preprocess)?;
    let scores = c.predict(&prepared, batch)?;
    let entries = ds
        .samples
        .iter()
        .zip(scores)
        .map(|(s, score)| crate::metrics::Prediction {
            image_id: s.id.clone(),
            true_label: s.label as u8,
            score,
        })
        .collect();
    PredictionSet::new(entries)
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Executes one configuration's staging on one fold rotation.
pub fn run_configuration(cfg: &TransferConfig, data: &RunData, hp: &TrainingHyperparams, seed: u64) -> Result<TrainedModel> {
    cfg.validate()?;
    hp.validate()?;
    let strategy = cfg.strategy;
    let weights = if strategy.uses_imagenet() {
        Some(data.imagenet_weights.ok_or_else(|| Error::Weights {
            path: PathBuf::new(),
            message: format!("strategy {strategy} needs ImageNet weights for {}", cfg.backbone.name),
        })?)
    } else {
        None
    };
    let intermediate = if strategy.uses_intermediate() {
        Some(data.intermediate.ok_or_else(|| Error::invalid(format!("strategy {strategy} needs an intermediate dataset")))?)
    } else {
        None
    };
    let (mut backbone, entry) = build_backbone(&cfg.backbone.name, hp.input_size, weights, seed)?;
    let n = backbone.graph.len();
    let size = backbone.graph.input_shape()[1];
    let mut phases = Vec::new();

    match strategy.phases()[0] {
        Phase::IntermediateFullPretrain => {
            let ds = intermediate.expect("checked above");
            phases.push(intermediate_pretrain(&mut backbone, n, Phase::IntermediateFullPretrain, ds, entry.preprocess, hp, seed ^ 0x11)?);
        }
        Phase::PartialIntermediatePretrain => {
            let ds = intermediate.expect("checked above");
            let u = cfg.u.expect("validated");
            phases.push(pretrain_partial(&mut backbone, u, ds, entry.preprocess, hp, seed ^ 0x11)?);
        }
        _ => {}
    }

    let mut classifier = attach_head(backbone, &hp.head, entry.preprocess, seed.wrapping_add(1))?;
    let train_ds = Dataset::training(data.manifest, &data.splits.train_ids, data.augmented)?;
    let val_ds = Dataset::from_ids(data.manifest, &data.splits.val_ids)?;
    let train = Prepared::new(&train_ds, size, entry.preprocess)?;
    let val = Prepared::new(&val_ds, size, entry.preprocess)?;

    let binary_phases: Vec<Phase> = strategy
        .phases()
        .iter()
        .copied()
        .filter(|p| !matches!(p, Phase::IntermediateFullPretrain | Phase::PartialIntermediatePretrain))
        .collect();
    let last = binary_phases.len() - 1;
    for (k, phase) in binary_phases.into_iter().enumerate() {
        let (u, lr, cap) = match phase {
            Phase::FullTrain | Phase::FullFineTune => (n, hp.lr_finetune, hp.max_epochs),
            Phase::HeadTrain => (0, hp.lr_head, if k == last { hp.max_epochs } else { hp.head_max_epochs }),
            Phase::SuffixFineTune => (cfg.u.expect("validated"), hp.lr_finetune, hp.max_epochs),
            _ => unreachable!("intermediate phases handled above"),
        };
        classifier.set_unfrozen_suffix(u)?;
        let fit = Fit {
            train: &train,
            val: &val,
            lr,
            max_epochs: cap,
            classes: 2,
        };
        phases.push(run_phase(&mut classifier.model, phase, u, fit, hp, seed ^ (0x100 + k as u64))?);
    }

    let fin = phases.last().expect("every strategy has a binary phase");
    Ok(TrainedModel {
        history: fin.history.clone(),
        best_epoch: fin.best_epoch,
        stopped_epoch: fin.stopped_epoch,
        classifier,
        config: cfg.clone(),
        fold: data.splits.test_fold,
        phases,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateOutcome {
    pub u: usize,
    pub val_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnfreezeSearch {
    pub best_u: usize,
    pub candidates: Vec<CandidateOutcome>,
}

/// Picks the best of per-candidate validation accuracies; ties go to the
/// smaller depth. `None` when every candidate failed.
pub fn select_unfreeze_depth(outcomes: &[CandidateOutcome]) -> Option<usize> {
    outcomes
        .iter()
        .filter_map(|o| o.val_acc.map(|a| (o.u, a)))
        .fold(None, |best: Option<(usize, f64)>, (u, a)| match best {
            Some((bu, ba)) if ba > a || (ba == a && bu <= u) => Some((bu, ba)),
            _ => Some((u, a)),
        })
        .map(|(u, _)| u)
}

/// Trains one model per candidate depth on the same split and keeps the depth
/// with the highest best-epoch validation accuracy.
pub fn search_unfreeze_depth(
    strategy: Strategy,
    backbone: &BackboneDescriptor,
    candidates: &[usize],
    data: &RunData,
    hp: &TrainingHyperparams,
    seed: u64,
) -> Result<UnfreezeSearch> {
    if candidates.is_empty() {
        return Err(Error::invalid("no unfreeze-depth candidates"));
    }
    if !strategy.needs_u() {
        return Err(Error::invalid(format!("strategy {strategy} takes no unfreeze depth")));
    }
    let mut outcomes = Vec::new();
    let mut errors = Vec::new();
    for &u in candidates {
        let run = TransferConfig::new(strategy, Some(u), backbone.clone()).and_then(|cfg| run_configuration(&cfg, data, hp, seed));
        match run {
            Ok(t) => outcomes.push(CandidateOutcome {
                u,
                val_acc: Some(t.history[t.best_epoch].val_acc),
                error: None,
            }),
            Err(e) => {
                outcomes.push(CandidateOutcome {
                    u,
                    val_acc: None,
                    error: Some(e.to_string()),
                });
                errors.push(e);
            }
        }
    }
    match select_unfreeze_depth(&outcomes) {
        Some(best_u) => Ok(UnfreezeSearch {
            best_u,
            candidates: outcomes,
        }),
        None => Err(errors.remove(0)),
    }
}

/// Descriptor for `name` at the resolution training will use.
pub fn descriptor_for(name: &str, hp: &TrainingHyperparams, ws: WeightSource) -> Result<BackboneDescriptor> {
    let e = zoo::entry(name)?;
    Ok(match hp.input_size {
        Some(s) if s != e.input_size => e.describe(&e.graph_at(s), ws),
        _ => e.descriptor(ws),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("IMG_XYZ".parse::<Strategy>().is_err());
    }

    #[test]
    fn hamppftu_phase_order() {
        assert_eq!(
            Strategy::ImgHamppFtu.phases(),
            &[Phase::PartialIntermediatePretrain, Phase::HeadTrain, Phase::SuffixFineTune]
        );
    }

    #[test]
    fn u_required_only_for_ftu() {
        let d = zoo::entry("ResNet50").unwrap().descriptor(WeightSource::Imagenet);
        assert!(TransferConfig::new(Strategy::ImgFtu, None, d.clone()).is_err());
        assert!(TransferConfig::new(Strategy::ImgFft, Some(3), d.clone()).is_err());
        assert!(TransferConfig::new(Strategy::ImgFtu, Some(d.total_layers + 1), d.clone()).is_err());
        let cfg = TransferConfig::new(Strategy::ImgFtu, Some(141), d).unwrap();
        assert_eq!(cfg.label(), "ResNet50-141-IMG_FTU");
    }

    #[test]
    fn resnet50_head_adds_2049() {
        let c = Classifier::build("ResNet50", None, None, &HeadSpec::default(), 0).unwrap();
        assert_eq!(c.feature_channels(), 2048);
        assert_eq!(c.head_params(), 2049);
    }

    #[test]
    fn unknown_backbone_lists_names() {
        let e = Classifier::build("ResNet51", None, None, &HeadSpec::default(), 0).unwrap_err();
        assert!(e.to_string().contains("ResNet50"));
    }

    #[test]
    fn suffix_zero_leaves_only_head() {
        let mut c = Classifier::build("VGG16", Some(32), None, &HeadSpec::default(), 0).unwrap();
        c.set_unfrozen_suffix(0).unwrap();
        assert_eq!(c.model.trainable_param_count(), c.head_params());
        assert!(c.set_unfrozen_suffix(c.backbone_layers + 1).is_err());
    }

    #[test]
    fn tie_goes_to_smaller_depth() {
        let o = |u, a| CandidateOutcome { u, val_acc: Some(a), error: None };
        assert_eq!(select_unfreeze_depth(&[o(100, 0.8), o(50, 0.8)]), Some(50));
        assert_eq!(select_unfreeze_depth(&[o(100, 0.9), o(50, 0.8)]), Some(100));
    }

    #[test]
    fn bce_seed_is_p_minus_y() {
        let out = Tensor::from_vec([2, 1, 1, 1], vec![0.8, 0.3]);
        let (loss, correct, g) = loss_and_seed(&out, &[1, 1], 2, 2.0);
        assert!((loss - (-(0.8f64.ln()) - 0.3f64.ln())).abs() < 1e-5);
        assert_eq!(correct, 1);
        assert!((g.data[0] + 0.1).abs() < 1e-6 && (g.data[1] + 0.35).abs() < 1e-6);
    }
}
