//! Image ingestion, near-duplicate removal and stratified fold planning.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

pub const POSITIVE: &str = "EM";
pub const NEGATIVE: &str = "Confuser";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: String,
    pub source: String,
    #[serde(serialize_with = "hex_ser", deserialize_with = "hex_de")]
    pub phash: u64,
}

fn hex_ser<S: Serializer>(v: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:016x}"))
}

fn hex_de<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
    let s = String::deserialize(d)?;
    if s.len() != 16 {
        return Err(serde::de::Error::custom(format!("phash {s:?} is not 16 hex digits")));
    }
    u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
    /// Positive class first.
    pub class_names: [String; 2],
}

impl Manifest {
    pub fn new(records: Vec<ImageRecord>) -> Manifest {
        Manifest {
            records,
            class_names: [POSITIVE.to_string(), NEGATIVE.to_string()],
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut m: BTreeMap<String, usize> = self.class_names.iter().map(|c| (c.clone(), 0)).collect();
        for r in &self.records {
            *m.entry(r.label.clone()).or_insert(0) += 1;
        }
        m
    }

    /// 1 for the positive class, 0 otherwise.
    pub fn binary_label(&self, label: &str) -> u8 {
        u8::from(label == self.class_names[0])
    }

    pub fn index(&self) -> HashMap<&str, &ImageRecord> {
        self.records.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                return Err(Error::invalid(format!("duplicate id {}", r.id)));
            }
            if !self.class_names.contains(&r.label) {
                return Err(Error::invalid(format!("record {} has unknown label {}", r.id, r.label)));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Manifest> {
        let mut rd = csv::Reader::from_path(path)?;
        let records = rd.deserialize().collect::<std::result::Result<Vec<ImageRecord>, _>>()?;
        let m = Manifest::new(records);
        m.validate()?;
        Ok(m)
    }
}

/// 64-bit difference hash: grayscale, resize to 9x8, one bit per
/// horizontally adjacent pair (set when the left pixel is brighter).
pub fn dhash(img: &image::DynamicImage) -> u64 {
    let small = image::imageops::resize(&img.to_luma32f(), 9, 8, FilterType::Triangle);
    let mut h = 0u64;
    for y in 0..8 {
        for x in 0..8 {
            let l = small.get_pixel(x, y)[0];
            let r = small.get_pixel(x + 1, y)[0];
            h = (h << 1) | u64::from(l > r);
        }
    }
    h
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Maps class subdirectory names onto class tags.
#[derive(Clone, Debug)]
pub struct Labeling {
    pub dirs: [(String, String); 2],
}

impl Default for Labeling {
    fn default() -> Self {
        Labeling {
            dirs: [
                (POSITIVE.to_string(), POSITIVE.to_string()),
                (NEGATIVE.to_string(), NEGATIVE.to_string()),
            ],
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub skipped: Vec<PathBuf>,
}

pub fn load_image(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Walks `root/<class dir>/**` and hashes every decodable image. Files whose
/// format cannot be recognized are skipped and reported.
pub fn ingest_directory(root: &Path, labeling: &Labeling) -> Result<(Manifest, IngestReport)> {
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
    }
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    for (dir, class) in &labeling.dirs {
        let class_root = root.join(dir);
        let mut count = 0;
        if class_root.is_dir() {
            let walk = walkdir::WalkDir::new(&class_root).sort_by_file_name();
            for entry in walk {
                let entry = entry.map_err(|e| {
                    let path = e.path().unwrap_or(&class_root).to_path_buf();
                    Error::io(path, e.into())
                })?;
                if !entry.file_type().is_file() {
                    continue;
                }
                let path = entry.path();
                let reader = image::ImageReader::open(path)
                    .map_err(|e| Error::io(path, e))?
                    .with_guessed_format()
                    .map_err(|e| Error::io(path, e))?;
                if reader.format().is_none() {
                    report.skipped.push(path.to_path_buf());
                    continue;
                }
                let img = reader.decode().map_err(|e| Error::Image {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })?;
                let rel = path.strip_prefix(root).unwrap_or(path).with_extension("");
                records.push(ImageRecord {
                    id: rel.to_string_lossy().replace('\\', "/"),
                    path: path.to_path_buf(),
                    label: class.clone(),
                    source: dir.clone(),
                    phash: dhash(&img),
                });
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyClass(class.clone()));
        }
    }
    let mut m = Manifest::new(records);
    m.class_names = [labeling.dirs[0].1.clone(), labeling.dirs[1].1.clone()];
    m.validate()?;
    Ok((m, report))
}

/// Keeps the first record of every group within `threshold` bits of an
/// already kept record.
pub fn dedup(m: &Manifest, threshold: u32) -> Manifest {
    let mut kept: Vec<ImageRecord> = Vec::new();
    for r in &m.records {
        if kept.iter().all(|k| hamming(k.phash, r.phash) > threshold) {
            kept.push(r.clone());
        }
    }
    Manifest {
        records: kept,
        class_names: m.class_names.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<FoldPlan> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Ids per class in manifest order.
fn by_class<'a>(m: &'a Manifest, ids: Option<&HashSet<&str>>) -> Vec<Vec<&'a str>> {
    m.class_names
        .iter()
        .map(|c| {
            m.records
                .iter()
                .filter(|r| &r.label == c && ids.is_none_or(|s| s.contains(r.id.as_str())))
                .map(|r| r.id.as_str())
                .collect()
        })
        .collect()
}

/// Shuffles each class with `seed`, then deals it round-robin over the
/// folds, continuing the deal where the previous class stopped.
pub fn stratified_kfold(m: &Manifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (class, mut ids) in m.class_names.iter().zip(by_class(m, None)) {
        if ids.len() < k {
            return Err(Error::invalid(format!("class {class} has {} images, fewer than k={k}", ids.len())));
        }
        ids.shuffle(&mut rng);
        for id in ids {
            folds[next].push(id.to_string());
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan { k, seed, folds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub test_fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub val_fraction: f64,
}

/// Splits `total` into per-class quotas proportional to `sizes` that sum to
/// `total` exactly (largest remainder).
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let exact: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total - q.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        q[i] += 1;
        left -= 1;
    }
    q
}

/// Holds out fold `test_fold` for testing and a stratified `val_fraction`
/// of the rest for validation.
pub fn make_run_splits(
    plan: &FoldPlan,
    m: &Manifest,
    test_fold: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if test_fold >= plan.k {
        return Err(Error::invalid(format!("test fold {test_fold} out of range 0..{}", plan.k)));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let pool: HashSet<&str> = plan
        .folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != test_fold)
        .flat_map(|(_, f)| f.iter().map(String::as_str))
        .collect();
    let classes = by_class(m, Some(&pool));
    let sizes: Vec<usize> = classes.iter().map(Vec::len).collect();
    let total = (val_fraction * pool.len() as f64).round() as usize;
    let quotas = apportion(&sizes, total);
    if quotas.contains(&0) {
        return Err(Error::invalid(format!(
            "val_fraction {val_fraction} leaves a class without validation samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (test_fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut val = Vec::new();
    let mut train = Vec::new();
    for (mut ids, q) in classes.into_iter().zip(quotas) {
        ids.shuffle(&mut rng);
        val.extend(ids[..q].iter().map(|s| s.to_string()));
        train.extend(ids[q..].iter().map(|s| s.to_string()));
    }
    train.sort();
    val.sort();
    let mut test = plan.folds[test_fold].clone();
    test.sort();
    Ok(SplitAssignment {
        test_fold,
        train_ids: train,
        val_ids: val,
        test_ids: test,
        val_fraction,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn synthetic(pos: usize, neg: usize) -> Manifest {
        let rec = |i: usize, label: &str| ImageRecord {
            id: format!("{label}_{i:04}"),
            path: PathBuf::from(format!("{label}/{i}.png")),
            label: label.to_string(),
            source: "synthetic".into(),
            phash: i as u64,
        };
        let mut r: Vec<_> = (0..pos).map(|i| rec(i, POSITIVE)).collect();
        r.extend((0..neg).map(|i| rec(i, NEGATIVE)));
        Manifest::new(r)
    }

    fn counts(plan: &FoldPlan, class: &str) -> Vec<usize> {
        plan.folds.iter().map(|f| f.iter().filter(|id| id.starts_with(class)).count()).collect()
    }

    #[test]
    fn fold_counts_for_866_806() {
        let plan = stratified_kfold(&synthetic(866, 806), 5, 1).unwrap();
        let mut em = counts(&plan, POSITIVE);
        let mut cf = counts(&plan, NEGATIVE);
        em.sort();
        cf.sort();
        assert_eq!(em, vec![173, 173, 173, 173, 174]);
        assert_eq!(cf, vec![161, 161, 161, 161, 162]);
    }

    #[test]
    fn ten_images_one_per_class_per_fold() {
        let plan = stratified_kfold(&synthetic(5, 5), 5, 3).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 2));
        assert_eq!(counts(&plan, POSITIVE), vec![1; 5]);
    }

    #[test]
    fn small_class_rejected() {
        assert!(stratified_kfold(&synthetic(3, 10), 5, 0).is_err());
    }

    #[test]
    fn split_sizes_for_1672_records() {
        let m = synthetic(866, 806);
        let plan = stratified_kfold(&m, 5, 7).unwrap();
        let fold = plan.folds.iter().position(|f| f.len() == 334).unwrap();
        let s = make_run_splits(&plan, &m, fold, 0.10, 7).unwrap();
        assert_eq!(s.test_ids.len(), 334);
        assert_eq!(s.val_ids.len(), 134);
        assert_eq!(s.train_ids.len(), 1204);
    }

    #[test]
    fn tiny_val_fraction_rejected() {
        let m = synthetic(10, 10);
        let plan = stratified_kfold(&m, 2, 0).unwrap();
        assert!(make_run_splits(&plan, &m, 0, 0.01, 0).is_err());
        assert!(make_run_splits(&plan, &m, 2, 0.1, 0).is_err());
    }

    #[test]
    fn phash_hex_round_trip() {
        let m = synthetic(2, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        m.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,path,label,source,phash\n"));
        assert!(text.contains(",0000000000000001\n"));
        assert_eq!(Manifest::read_csv(&p).unwrap(), m);
    }

    /// Smooth pseudo-photo: a sum of a few low-frequency waves.
    pub(crate) fn smooth_image(w: u32, h: u32, seed: u32) -> image::RgbImage {
        let f = seed as f32 * 0.7 + 1.0;
        image::RgbImage::from_fn(w, h, |x, y| {
            let u = x as f32 / w as f32;
            let v = y as f32 / h as f32;
            let g = 0.5 + 0.25 * (6.0 * u * f).sin() + 0.2 * (4.0 * v + f).cos() + 0.05 * (9.0 * u * v).sin();
            let c = (g.clamp(0.0, 1.0) * 255.0) as u8;
            image::Rgb([c, c / 2 + 60, 255 - c])
        })
    }

    fn write_tree(root: &Path, em: usize, cf: usize) {
        for (dir, n) in [(POSITIVE, em), (NEGATIVE, cf)] {
            std::fs::create_dir_all(root.join(dir)).unwrap();
            for i in 0..n {
                smooth_image(32, 32, (i + 10 * dir.len()) as u32).save(root.join(dir).join(format!("{i}.png"))).unwrap();
            }
        }
    }

    #[test]
    fn ingest_counts_and_skips_text() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 2, 3);
        std::fs::write(dir.path().join(NEGATIVE).join("notes.txt"), "not an image").unwrap();
        let (m, report) = ingest_directory(dir.path(), &Labeling::default()).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.class_counts()[POSITIVE], 2);
        assert_eq!(m.class_counts()[NEGATIVE], 3);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(m.records[0].id, "EM/0");
    }

    #[test]
    fn ingest_rejects_empty_class() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 2, 0);
        let err = ingest_directory(dir.path(), &Labeling::default()).unwrap_err();
        assert!(err.to_string().contains("has zero images"), "{err}");
    }

    #[test]
    fn identical_files_collapse() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 1, 1);
        std::fs::copy(dir.path().join("EM/0.png"), dir.path().join("EM/1.png")).unwrap();
        let (m, _) = ingest_directory(dir.path(), &Labeling::default()).unwrap();
        assert_eq!(m.len(), 3);
        let d = dedup(&m, 0);
        assert_eq!(d.len(), 2);
        assert_eq!(d.records[0].id, "EM/0");
    }

    #[test]
    fn half_scale_copy_has_same_hash() {
        for seed in 0..5 {
            let img = image::DynamicImage::ImageRgb8(smooth_image(256, 192, seed));
            let half = img.resize_exact(128, 96, FilterType::Triangle);
            assert_eq!(hamming(dhash(&img), dhash(&half)), 0, "seed {seed}");
        }
    }

    #[test]
    fn unrelated_images_differ() {
        let a = image::DynamicImage::ImageRgb8(smooth_image(64, 64, 1));
        let b = image::DynamicImage::ImageRgb8(smooth_image(64, 64, 4));
        assert!(hamming(dhash(&a), dhash(&b)) > 0);
    }
}
