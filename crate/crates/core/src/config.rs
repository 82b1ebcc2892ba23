//! Flat `key = value` run configuration.
//!
//! ```text
//! schema_version = 1
//! dataset_root = data/lesions
//! intermediate_root = data/ham10000      # needed by HAM* strategies
//! imagenet_weights = weights             # <Backbone>.tlw per backbone
//! backbones = ResNet50, MobileNetV3Small
//! strategies = IMG_WFT, IMG_FTU, IMG_HAMPP_FTU
//! u.IMG_FTU = 20                         # every backbone
//! u.IMG_FTU.ResNet50 = 141               # one backbone
//! u_grid.IMG_HAMPP_FTU = 10, 20, 40      # searched on fold 0
//! folds = 5
//! val_fraction = 0.1
//! seed = 1
//! output_dir = results
//! augment = true
//! augment.expansion_factor = 20
//! dedup_threshold = 4
//! hp.lr_head = 0.0001
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::transfer::{Strategy, TrainingHyperparams};
use crate::{zoo, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UChoice {
    Fixed(usize),
    Grid(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset_root: PathBuf,
    pub intermediate_root: Option<PathBuf>,
    pub imagenet_weights: Option<PathBuf>,
    pub backbones: Vec<String>,
    pub strategies: Vec<Strategy>,
    /// Keyed by strategy and optional backbone; the backbone-specific entry wins.
    pub u: BTreeMap<(Strategy, Option<String>), UChoice>,
    pub folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub augment: bool,
    pub expansion_factor: Option<usize>,
    pub dedup_threshold: Option<u32>,
    pub hp: TrainingHyperparams,
    /// Raw file bytes, hashed into the run id.
    pub source: String,
}

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Config {
        line,
        message: format!("{key}: cannot parse {v:?}: {e}"),
    })
}

fn parse_list<T: FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(line, key, s))
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut cfg = RunConfig {
            schema_version: 0,
            dataset_root: PathBuf::new(),
            intermediate_root: None,
            imagenet_weights: None,
            backbones: Vec::new(),
            strategies: Vec::new(),
            u: BTreeMap::new(),
            folds: 5,
            val_fraction: 0.1,
            seed: 0,
            output_dir: base.join("results"),
            augment: true,
            expansion_factor: None,
            dedup_threshold: None,
            hp: TrainingHyperparams::default(),
            source: text.to_string(),
        };
        let path = |v: &str| base.join(v);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected `key = value`, got {content:?}"),
            })?;
            let (key, v) = (key.trim(), value.trim());
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(Error::Config {
                    line,
                    message: format!("{key} already set on line {first}"),
                });
            }
            match key {
                "schema_version" => cfg.schema_version = parse_value(line, key, v)?,
                "dataset_root" => cfg.dataset_root = path(v),
                "intermediate_root" => cfg.intermediate_root = Some(path(v)),
                "imagenet_weights" => cfg.imagenet_weights = Some(path(v)),
                "backbones" => cfg.backbones = parse_list(line, key, v)?,
                "strategies" => cfg.strategies = parse_list(line, key, v)?,
                "folds" => cfg.folds = parse_value(line, key, v)?,
                "val_fraction" => cfg.val_fraction = parse_value(line, key, v)?,
                "seed" => cfg.seed = parse_value(line, key, v)?,
                "output_dir" => cfg.output_dir = path(v),
                "augment" => cfg.augment = parse_value(line, key, v)?,
                "augment.expansion_factor" => cfg.expansion_factor = Some(parse_value(line, key, v)?),
                "dedup_threshold" => cfg.dedup_threshold = Some(parse_value(line, key, v)?),
                "hp.beta1" => cfg.hp.beta1 = parse_value(line, key, v)?,
                "hp.beta2" => cfg.hp.beta2 = parse_value(line, key, v)?,
                "hp.lr_head" => cfg.hp.lr_head = parse_value(line, key, v)?,
                "hp.lr_finetune" => cfg.hp.lr_finetune = parse_value(line, key, v)?,
                "hp.batch_size" => cfg.hp.batch_size = parse_value(line, key, v)?,
                "hp.patience" => cfg.hp.patience = parse_value(line, key, v)?,
                "hp.max_epochs" => cfg.hp.max_epochs = parse_value(line, key, v)?,
                "hp.head_max_epochs" => cfg.hp.head_max_epochs = parse_value(line, key, v)?,
                "hp.intermediate_val_fraction" => cfg.hp.intermediate_val_fraction = parse_value(line, key, v)?,
                "hp.dropout_rate" => cfg.hp.head.dropout_rate = parse_value(line, key, v)?,
                "hp.input_size" => cfg.hp.input_size = Some(parse_value(line, key, v)?),
                _ => {
                    let (grid, rest) = if let Some(r) = key.strip_prefix("u_grid.") {
                        (true, r)
                    } else if let Some(r) = key.strip_prefix("u.") {
                        (false, r)
                    } else {
                        return Err(Error::Config {
                            line,
                            message: format!("unknown key {key:?}"),
                        });
                    };
                    let (s, backbone) = match rest.split_once('.') {
                        Some((s, b)) => (s, Some(b.to_string())),
                        None => (rest, None),
                    };
                    let strategy: Strategy = parse_value(line, key, s)?;
                    let choice = if grid {
                        let g: Vec<usize> = parse_list(line, key, v)?;
                        if g.is_empty() {
                            return Err(Error::Config {
                                line,
                                message: format!("{key}: empty grid"),
                            });
                        }
                        UChoice::Grid(g)
                    } else {
                        UChoice::Fixed(parse_value(line, key, v)?)
                    };
                    if cfg.u.insert((strategy, backbone), choice).is_some() {
                        return Err(Error::Config {
                            line,
                            message: format!("U for {rest} given twice"),
                        });
                    }
                }
            }
        }
        cfg.validate(&seen)?;
        Ok(cfg)
    }

    fn validate(&self, seen: &BTreeMap<String, usize>) -> Result<()> {
        let at = |key: &str| seen.get(key).copied().unwrap_or(0);
        let fail = |key: &str, message: String| Err(Error::Config { line: at(key), message });
        if self.schema_version != SCHEMA_VERSION {
            return fail(
                "schema_version",
                format!("schema_version must be {SCHEMA_VERSION}, got {}", self.schema_version),
            );
        }
        if !seen.contains_key("dataset_root") {
            return fail("dataset_root", "dataset_root is required".into());
        }
        if self.backbones.is_empty() {
            return fail("backbones", "at least one backbone is required".into());
        }
        if self.strategies.is_empty() {
            return fail("strategies", "at least one strategy is required".into());
        }
        for b in &self.backbones {
            if let Err(e) = zoo::entry(b) {
                return fail("backbones", e.to_string());
            }
        }
        if self.strategies.iter().any(|s| s.uses_intermediate()) && self.intermediate_root.is_none() {
            return fail("strategies", "HAM strategies need intermediate_root".into());
        }
        if self.strategies.iter().any(|s| s.uses_imagenet()) && self.imagenet_weights.is_none() {
            return fail("strategies", "IMG strategies need imagenet_weights".into());
        }
        for s in &self.strategies {
            for b in &self.backbones {
                let n = zoo::entry(b)?.descriptor(zoo::WeightSource::None).total_layers;
                match (s.needs_u(), self.u_for(*s, b)) {
                    (true, None) => return fail("strategies", format!("{s} needs u.{s} or u_grid.{s} for {b}")),
                    (true, Some(UChoice::Fixed(u))) if *u > n => {
                        return fail(&format!("u.{s}"), format!("U={u} exceeds {b}'s {n} layers"))
                    }
                    (true, Some(UChoice::Grid(g))) if g.iter().any(|u| *u > n) => {
                        return fail(&format!("u_grid.{s}"), format!("grid {g:?} exceeds {b}'s {n} layers"))
                    }
                    _ => {}
                }
            }
        }
        if self.folds < 2 {
            return fail("folds", format!("folds must be at least 2, got {}", self.folds));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction", format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if self.expansion_factor == Some(0) {
            return fail("augment.expansion_factor", "expansion factor must be positive".into());
        }
        self.hp.validate().map_err(|e| Error::Config {
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn u_for(&self, strategy: Strategy, backbone: &str) -> Option<&UChoice> {
        self.u
            .get(&(strategy, Some(backbone.to_string())))
            .or_else(|| self.u.get(&(strategy, None)))
    }

    /// First 12 hex digits of SHA-256 over the config bytes and the seed.
    pub fn run_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source.as_bytes());
        h.update(self.seed.to_le_bytes());
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn store_root(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    /// `<imagenet_weights>/<backbone>.tlw`.
    pub fn weights_for(&self, backbone: &str) -> Option<PathBuf> {
        self.imagenet_weights.as_ref().map(|d| d.join(format!("{backbone}.tlw")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "schema_version = 1\ndataset_root = data\nbackbones = MobileNetV3Small\n";

    fn parse(extra: &str) -> Result<RunConfig> {
        RunConfig::parse(&format!("{BASE}{extra}"), Path::new("/cfg"))
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse("strategies = NTL\n").unwrap();
        assert_eq!(c.folds, 5);
        assert_eq!(c.dataset_root, PathBuf::from("/cfg/data"));
        assert_eq!(c.output_dir, PathBuf::from("/cfg/results"));
        assert_eq!(c.strategies, vec![Strategy::Ntl]);
        assert_eq!(c.run_id().len(), 12);
    }

    #[test]
    fn u_lookup_prefers_backbone_key() {
        let c = parse(
            "strategies = IMG_FTU, IMG_HAMPP_FTU\nimagenet_weights = w\nintermediate_root = ham\n\
             u.IMG_FTU = 20\nu.IMG_FTU.MobileNetV3Small = 30\nu_grid.IMG_HAMPP_FTU = 5, 10\n",
        )
        .unwrap();
        assert_eq!(c.u_for(Strategy::ImgFtu, "MobileNetV3Small"), Some(&UChoice::Fixed(30)));
        assert_eq!(c.u_for(Strategy::ImgFtu, "ResNet50"), Some(&UChoice::Fixed(20)));
        assert_eq!(c.u_for(Strategy::ImgHamppFtu, "MobileNetV3Small"), Some(&UChoice::Grid(vec![5, 10])));
        assert_eq!(c.weights_for("ResNet50"), Some(PathBuf::from("/cfg/w/ResNet50.tlw")));
    }

    #[test]
    fn rejects_bad_configs() {
        let line_of = |extra: &str| match parse(extra) {
            Err(Error::Config { line, .. }) => line,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(line_of("strategies = NTL\nbogus = 1\n"), 5);
        assert_eq!(line_of("strategies = NTL\nseed = x\n"), 5);
        assert_eq!(line_of("strategies = NTL\nseed = 1\nseed = 2\n"), 6);
        assert_eq!(line_of("strategies = IMG_FTU\nimagenet_weights = w\n"), 4);
        assert_eq!(line_of("strategies = IMG_FTU\nimagenet_weights = w\nu.IMG_FTU = 9999\n"), 6);
        assert_eq!(line_of("strategies = NOPE\n"), 4);
        assert!(RunConfig::parse("dataset_root = d\nbackbones = ResNet50\nstrategies = NTL\n", Path::new(".")).is_err());
        assert!(parse("strategies = NTL\nbackbones = Nope\n").is_err());
    }

    #[test]
    fn run_id_depends_on_bytes_and_seed() {
        let a = parse("strategies = NTL\nseed = 1\n").unwrap();
        let b = parse("strategies = NTL\nseed = 2\n").unwrap();
        let a2 = parse("strategies = NTL\nseed = 1\n").unwrap();
        assert_ne!(a.run_id(), b.run_id());
        assert_eq!(a.run_id(), a2.run_id());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let c = parse("\n# note\nstrategies = NTL  # trailing\nhp.patience = 3\nhp.input_size = 96\n").unwrap();
        assert_eq!(c.hp.patience, 3);
        assert_eq!(c.hp.input_size, Some(96));
    }
}
