//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails. Pass criterion names as arguments to run a subset.
//!
//! Set `TLBENCH_BLESS=1` to rewrite the golden SVGs under `tests/golden/`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tlbench::augment::{self, AugmentationSpec, AugmentedSet};
use tlbench::complexity::{self, ComplexityReport};
use tlbench::data::{self, FoldPlan, ImageRecord, Manifest, NEGATIVE, POSITIVE};
use tlbench::explain::{self, Heatmap};
use tlbench::metrics::{self, Prediction, PredictionSet, METRICS};
use tlbench::nn::{
    Activation, Conv2d, Dense, GraphBuilder, Model, NodeId, Op, Padding, Pool2d, PoolKind, Tensor,
};
use tlbench::report::{self, BubblePoint};
use tlbench::stats::{self, AccuracyMatrix, Friedman, PMethod};
use tlbench::store::{self, ResultStore};
use tlbench::transfer::{
    self, Classifier, HeadSpec, Prepared, RunData, Strategy, TrainingHyperparams, TransferConfig,
};
use tlbench::zoo::{self, Preprocess, WeightSource};
use tlbench::synth;

#[derive(Default)]
struct Checks {
    items: Vec<(String, bool)>,
    notes: Vec<String>,
}

impl Checks {
    fn check(&mut self, what: impl Into<String>, ok: bool) {
        self.items.push((what.into(), ok));
    }

    fn note(&mut self, n: impl Into<String>) {
        self.notes.push(n.into());
    }

    fn passed(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|(_, ok)| *ok)
    }
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------- complexity

fn parameter_counts() -> Checks {
    let mut c = Checks::default();
    for (name, expected) in [
        ("VGG16", 14.72),
        ("ResNet50", 23.59),
        ("DenseNet121", 7.04),
        ("MobileNetV2", 2.26),
        ("EfficientNetB0", 4.05),
    ] {
        let cls = Classifier::build(name, None, None, &HeadSpec::default(), 0).unwrap();
        let got = complexity::count_params(&cls.model.graph) as f64 / 1e6;
        c.note(format!("{name} {got:.3}M"));
        c.check(format!("{name}: {got:.4}M vs {expected}M"), (got - expected).abs() <= 0.02 * expected);
    }
    c
}

fn flop_counts() -> Checks {
    let mut c = Checks::default();
    c.check("2xMAC convention", complexity::FLOP_CONVENTION.starts_with("2xMAC"));
    for (name, expected) in [
        ("VGG16", 30.7),
        ("ResNet50", 7.75),
        ("MobileNetV3Small", 0.174),
        ("EfficientNetB0", 0.794),
    ] {
        let e = zoo::entry(name).unwrap();
        let graph = e.graph();
        let got = complexity::count_flops(&graph).total as f64 / 1e9;
        let [_, h, w] = graph.input_shape();
        c.note(format!("{name}@{h}x{w} {got:.3}G"));
        c.check(format!("{name}: {got:.4}G vs {expected}G"), (got - expected).abs() <= 0.10 * expected);
    }
    c
}

// ---------------------------------------------------------------- metrics

fn div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Textbook closed forms, written independently of the library's.
fn metric_oracle(tp: f64, fp: f64, tn: f64, fn_: f64) -> BTreeMap<&'static str, Option<f64>> {
    let n = tp + fp + tn + fn_;
    let tpr = div(tp, tp + fn_);
    let tnr = div(tn, tn + fp);
    let ppv = div(tp, tp + fp);
    let npv = div(tn, tn + fn_);
    let (fnr, fpr, fdr, for_) = (div(fn_, tp + fn_), div(fp, fp + tn), div(fp, tp + fp), div(fn_, tn + fn_));
    let mcc = (ppv * tpr * tnr * npv).sqrt() - (fdr * fnr * fpr * for_).sqrt();
    let kappa = div(2.0 * (tp * tn - fn_ * fp), (tp + fp) * (fp + tn) + (tp + fn_) * (fn_ + tn));
    let lr_pos = if fp == 0.0 && tn > 0.0 {
        None
    } else if fp + tn == 0.0 {
        Some(tpr)
    } else {
        Some(div(tp * (fp + tn), (tp + fn_) * fp))
    };
    let lr_neg = if tn == 0.0 {
        None
    } else if tp + fn_ == 0.0 {
        Some((tn + fp) / tn)
    } else {
        Some(fn_ * (tn + fp) / ((tp + fn_) * tn))
    };
    BTreeMap::from([
        ("accuracy", Some((tp + tn) / n)),
        ("sensitivity", Some(tpr)),
        ("specificity", Some(tnr)),
        ("precision", Some(ppv)),
        ("npv", Some(npv)),
        ("mcc", Some(mcc)),
        ("kappa", Some(kappa)),
        ("lr_pos", lr_pos),
        ("lr_neg", lr_neg),
        ("f1", Some(div(2.0 * tp, 2.0 * tp + fp + fn_))),
    ])
}

fn auc_oracle(labels: &[u8], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn metric_oracle_suite() -> Checks {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut bad) = (0.0f64, Vec::new());
    for t in 0..1000 {
        let mut cell = || if rng.gen_bool(0.15) { 0 } else { rng.gen_range(1..300u64) };
        let (mut tp, fp, tn, fn_) = (cell(), cell(), cell(), cell());
        if tp + fp + tn + fn_ == 0 {
            tp = 1;
        }
        let mut entries = Vec::new();
        for (count, label, score) in [(tp, 1, 0.9), (fn_, 1, 0.1), (fp, 0, 0.9), (tn, 0, 0.1)] {
            for _ in 0..count {
                entries.push(Prediction {
                    image_id: format!("i{}", entries.len()),
                    true_label: label,
                    score,
                });
            }
        }
        let r = metrics::evaluate(&PredictionSet::new(entries).unwrap()).unwrap();
        let cm = r.confusion;
        if (cm.tp, cm.fp, cm.tn, cm.fn_) != (tp, fp, tn, fn_) {
            bad.push(format!("matrix {t}: confusion {cm:?}"));
        }
        for (m, want) in metric_oracle(tp as f64, fp as f64, tn as f64, fn_ as f64) {
            let got = r.get(m);
            match (got, want) {
                (Some(g), Some(w)) => {
                    let d = (g - w).abs() / w.abs().max(1.0);
                    worst = worst.max(d);
                    if d > 1e-9 {
                        bad.push(format!("matrix {t} {m}: {g} vs {w}"));
                    }
                }
                (None, None) => {}
                _ => bad.push(format!("matrix {t} {m}: {got:?} vs {want:?}")),
            }
        }
    }
    c.note(format!("max metric deviation {worst:.1e}"));
    c.check(format!("1000 confusion matrices: {}", bad.first().cloned().unwrap_or_default()), bad.is_empty());

    let mut worst = 0.0f64;
    let mut fails = 0;
    for t in 0..200 {
        let n = rng.gen_range(2..=200);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let quantized = t % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| if quantized { rng.gen_range(0..10) as f64 / 10.0 } else { rng.gen::<f64>() })
            .collect();
        let p = PredictionSet::from_scores(&labels, &scores).unwrap();
        let got = metrics::evaluate(&p).unwrap().auc.unwrap();
        let d = (got - auc_oracle(&labels, &scores)).abs();
        worst = worst.max(d);
        fails += usize::from(d > 1e-12);
    }
    c.note(format!("max AUC deviation {worst:.1e}"));
    c.check(format!("200 AUC score sets ({fails} off)"), fails == 0);
    c
}

// ---------------------------------------------------------------- statistics

fn ranks_oracle(col: &[f64]) -> Vec<f64> {
    col.iter()
        .map(|&x| {
            let better = col.iter().filter(|&&y| y > x).count() as f64;
            let same = col.iter().filter(|&&y| y == x).count() as f64;
            1.0 + better + (same - 1.0) / 2.0
        })
        .collect()
}

/// Tie-corrected Friedman chi-square in its textbook form; `values[model][fold]`.
fn friedman_oracle(values: &[Vec<f64>]) -> f64 {
    let (k, n) = (values.len() as f64, values[0].len());
    let mut sums = vec![0.0; values.len()];
    let mut ties = 0.0;
    for f in 0..n {
        let col: Vec<f64> = values.iter().map(|v| v[f]).collect();
        for (s, r) in sums.iter_mut().zip(ranks_oracle(&col)) {
            *s += r;
        }
        let mut seen = Vec::new();
        for &x in &col {
            if !seen.contains(&x) {
                seen.push(x);
                let t = col.iter().filter(|&&y| y == x).count() as f64;
                ties += t * t * t - t;
            }
        }
    }
    let nf = n as f64;
    let mean_sq: f64 = sums.iter().map(|s| (s / nf).powi(2)).sum();
    let chi = 12.0 * nf / (k * (k + 1.0)) * (mean_sq - k * (k + 1.0).powi(2) / 4.0);
    let correction = 1.0 - ties / (nf * k * (k * k - 1.0));
    if correction <= 0.0 {
        0.0
    } else {
        chi / correction
    }
}

fn statistics_oracle() -> Checks {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    const DRAWS: usize = 20_000;
    let (mut worst_p, mut worst_s) = (0.0f64, 0.0f64);
    for t in 0..50 {
        let values: Vec<Vec<f64>> =
            (0..4).map(|_| (0..6).map(|_| (rng.gen_range(0.6..0.95f64) * 100.0).round() / 100.0).collect()).collect();
        let a = AccuracyMatrix::new((0..4).map(|i| format!("m{i}")).collect(), values.clone()).unwrap();
        let fr = stats::friedman_test(&stats::rank_models(&a).unwrap()).unwrap();
        let observed = friedman_oracle(&values);
        worst_s = worst_s.max((fr.statistic - observed).abs());
        let mut perm = values.clone();
        let mut hits = 0;
        for _ in 0..DRAWS {
            for f in 0..6 {
                let mut col: Vec<f64> = values.iter().map(|v| v[f]).collect();
                col.shuffle(&mut rng);
                for (row, x) in perm.iter_mut().zip(col) {
                    row[f] = x;
                }
            }
            hits += usize::from(friedman_oracle(&perm) >= observed - 1e-9);
        }
        let p = hits as f64 / DRAWS as f64;
        let d = (fr.p_value - p).abs();
        if d > worst_p {
            worst_p = d;
        }
        if d > 0.02 {
            c.check(format!("matrix {t}: p {} vs permutation {p}", fr.p_value), false);
        }
    }
    c.note(format!("max |p - p_perm| {worst_p:.4}"));
    c.check(format!("Friedman p within 0.02 on 50 4x6 matrices (max {worst_p:.4})"), worst_p <= 0.02);
    c.check(format!("Friedman statistic matches textbook form (max {worst_s:.1e})"), worst_s <= 1e-9);

    for (m, n, hand) in [
        (2, 10, 1.960 * (6.0f64 / 60.0).sqrt()),
        (5, 5, 2.728 * (30.0f64 / 30.0).sqrt()),
        (10, 5, 3.164 * (110.0f64 / 30.0).sqrt()),
    ] {
        let cd = stats::critical_difference(0.05, m, n).unwrap();
        c.check(format!("CD(m={m}, N={n}) = {cd} vs {hand}"), (cd - hand).abs() <= 1e-12);
    }

    let mut violations = Vec::new();
    for t in 0..100 {
        let m = rng.gen_range(2..=10);
        let n = rng.gen_range(2..=8);
        let values: Vec<Vec<f64>> =
            (0..m).map(|_| (0..n).map(|_| (rng.gen_range(0.5..1.0f64) * 50.0).round() / 50.0).collect()).collect();
        let a = AccuracyMatrix::new((0..m).map(|i| format!("m{i}")).collect(), values).unwrap();
        let r = stats::rank_models(&a).unwrap();
        let placeholder = Friedman {
            statistic: 0.0,
            df: m - 1,
            p_value: 1.0,
            method: PMethod::ChiSquare,
            p_chi2: 1.0,
        };
        let res = stats::nemenyi_cd(&r, &placeholder, 0.05).unwrap();
        let cd = res.critical_difference;
        let close = |i: usize, j: usize| (r.avg_rank[i] - r.avg_rank[j]).abs() < cd;
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).filter(|&(i, j)| close(i, j)).collect();
        if pairs != res.pairwise_not_different {
            violations.push(format!("input {t}: pair list"));
        }
        for q in &res.cliques {
            if q.len() < 2 || q.iter().any(|&i| q.iter().any(|&j| i != j && !close(i, j))) {
                violations.push(format!("input {t}: clique {q:?} not mutually close"));
            }
            if (0..m).any(|o| !q.contains(&o) && q.iter().all(|&i| close(i, o))) {
                violations.push(format!("input {t}: clique {q:?} not maximal"));
            }
        }
        for &(i, j) in &pairs {
            if !res.cliques.iter().any(|q| q.contains(&i) && q.contains(&j)) {
                violations.push(format!("input {t}: close pair ({i},{j}) has no bar"));
            }
        }
        let svg = stats::render_cd_diagram(&r, &res);
        if svg.matches("class=\"clique\"").count() != res.cliques.len() {
            violations.push(format!("input {t}: bar count"));
        }
    }
    c.check(
        format!("clique invariant on 100 inputs: {}", violations.first().cloned().unwrap_or_default()),
        violations.is_empty(),
    );
    c
}

// ---------------------------------------------------------------- splits

fn record(id: String, label: &str, path: PathBuf) -> ImageRecord {
    ImageRecord {
        id,
        path,
        label: label.to_string(),
        source: "synthetic".into(),
        phash: 0,
    }
}

fn split_properties() -> Checks {
    let mut c = Checks::default();
    let mut records = Vec::new();
    for i in 0..866 {
        records.push(record(format!("EM/{i:04}"), POSITIVE, PathBuf::from(format!("EM/{i:04}.jpg"))));
    }
    for i in 0..806 {
        records.push(record(format!("Confuser/{i:04}"), NEGATIVE, PathBuf::from(format!("Confuser/{i:04}.jpg"))));
    }
    let m = Manifest::new(records);
    let label: BTreeMap<&str, &str> = m.records.iter().map(|r| (r.id.as_str(), r.label.as_str())).collect();
    let plan = data::stratified_kfold(&m, 5, 11).unwrap();

    for class in [POSITIVE, NEGATIVE] {
        let counts: Vec<usize> = plan.folds.iter().map(|f| f.iter().filter(|id| label[id.as_str()] == class).count()).collect();
        let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
        c.check(format!("{class} per-fold counts {counts:?}"), spread <= 1);
    }
    let all: Vec<&String> = plan.folds.iter().flatten().collect();
    let distinct: BTreeSet<&String> = all.iter().copied().collect();
    c.check("folds disjoint and covering", all.len() == m.len() && distinct.len() == m.len());

    let mut holdout_ok = true;
    for f in 0..5 {
        let s = data::make_run_splits(&plan, &m, f, 0.1, 11).unwrap();
        let pool = m.len() - plan.folds[f].len();
        let mut seen: Vec<&String> = s.train_ids.iter().chain(&s.val_ids).chain(&s.test_ids).collect();
        seen.sort();
        seen.dedup();
        holdout_ok &= seen.len() == m.len();
        holdout_ok &= s.test_ids.iter().collect::<BTreeSet<_>>() == plan.folds[f].iter().collect::<BTreeSet<_>>();
        holdout_ok &= s.val_ids.len() == (0.1 * pool as f64).round() as usize;
        for class in [POSITIVE, NEGATIVE] {
            let in_pool = s.train_ids.iter().chain(&s.val_ids).filter(|id| label[id.as_str()] == class).count();
            let in_val = s.val_ids.iter().filter(|id| label[id.as_str()] == class).count();
            holdout_ok &= (in_val as f64 - 0.1 * in_pool as f64).abs() <= 1.0;
        }
    }
    c.check("10% stratified validation holdout on every fold", holdout_ok);

    let again = data::stratified_kfold(&m, 5, 11).unwrap();
    let other = data::stratified_kfold(&m, 5, 12).unwrap();
    let s1 = data::make_run_splits(&plan, &m, 2, 0.1, 11).unwrap();
    let s2 = data::make_run_splits(&again, &m, 2, 0.1, 11).unwrap();
    c.check("deterministic under a fixed seed", again == plan && s1 == s2);
    c.check("seed changes the plan", other.folds != plan.folds);
    c
}

// ---------------------------------------------------------------- augmentation

fn noise_image(w: u32, h: u32, rng: &mut impl Rng) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn augmentation_properties() -> Checks {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tmp = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for (i, label) in [POSITIVE, POSITIVE, NEGATIVE].into_iter().enumerate() {
        let path = tmp.path().join(format!("src_{i}.png"));
        noise_image(40, 30, &mut rng).save(&path).unwrap();
        records.push(record(format!("{label}/src_{i}"), label, path));
    }
    let m = Manifest::new(records);
    let ids: Vec<String> = m.records.iter().map(|r| r.id.clone()).collect();
    let spec = AugmentationSpec::standard();
    let a = augment::expand(&ids, &m, &spec, 9, &tmp.path().join("a")).unwrap();
    let per_source: BTreeMap<&str, usize> = a.items.iter().fold(BTreeMap::new(), |mut acc, l| {
        *acc.entry(l.source_id.as_str()).or_insert(0) += 1;
        acc
    });
    c.check(
        format!("expansion factor 20 ({} items from {} sources)", a.items.len(), ids.len()),
        spec.expansion_factor == 20 && a.items.len() == 60 && per_source.values().all(|&k| k == 20),
    );

    let zero = AugmentationSpec::standard().with_probability(0.0);
    let mut identity = true;
    for t in 0..20 {
        let img = noise_image(rng.gen_range(5..40), rng.gen_range(5..40), &mut rng);
        for (out, draws) in augment::replicas(&img, &format!("id{t}"), &zero, t) {
            identity &= out == img && draws.is_empty();
        }
    }
    c.check("probability-0 spec is pixel identity", identity);

    let mut involution = true;
    for _ in 0..50 {
        let img = noise_image(rng.gen_range(1..30), rng.gen_range(1..30), &mut rng);
        involution &= augment::flip_lr(&augment::flip_lr(&img)) == img;
        involution &= augment::flip_ud(&augment::flip_ud(&img)) == img;
    }
    c.check("flips are involutions", involution);

    let always = AugmentationSpec::standard().with_probability(1.0);
    let small = noise_image(8, 8, &mut rng);
    let (mut drawn, mut outside) = (0, 0);
    for _ in 0..2000 {
        let (_, draws) = augment::apply_once(&small, &always, &mut rng);
        for d in draws.iter().filter(|d| matches!(d.kind, "brightness" | "contrast" | "saturation")) {
            let v: f64 = d.value.parse().unwrap();
            drawn += 1;
            outside += usize::from(!(0.7..=1.3).contains(&v));
        }
    }
    c.check(format!("{drawn} photometric draws within [0.7, 1.3] ({outside} outside)"), drawn == 6000 && outside == 0);

    let b = augment::expand(&ids, &m, &spec, 9, &tmp.path().join("b")).unwrap();
    let d = augment::expand(&ids, &m, &spec, 10, &tmp.path().join("d")).unwrap();
    let (ba, bb, bd) = (dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")), dir_bytes(&tmp.path().join("d")));
    let strip = |s: &AugmentedSet| s.items.iter().map(|l| (l.source_id.clone(), l.replica, l.ops_applied.clone())).collect::<Vec<_>>();
    c.check("fixed seed is byte-deterministic", ba == bb && strip(&a) == strip(&b));
    c.check("seed changes the replicas", ba != bd && strip(&a) != strip(&d));
    c
}

// ---------------------------------------------------------------- transfer

const BACKBONE: &str = "MobileNetV3Small";
const SIZE: usize = 96;

fn staged_hp(max_epochs: usize, patience: usize) -> TrainingHyperparams {
    TrainingHyperparams {
        input_size: Some(SIZE),
        batch_size: 16,
        lr_head: 3e-3,
        lr_finetune: 1e-3,
        max_epochs,
        head_max_epochs: max_epochs.min(2),
        patience,
        ..Default::default()
    }
}

fn config(strategy: Strategy, u: Option<usize>, hp: &TrainingHyperparams) -> TransferConfig {
    let ws = if strategy.uses_imagenet() { WeightSource::Imagenet } else { WeightSource::None };
    TransferConfig::new(strategy, u, transfer::descriptor_for(BACKBONE, hp, ws).unwrap()).unwrap()
}

fn bce(p: f64, y: usize) -> f64 {
    let q = (p as f32).clamp(1e-7, 1.0 - 1e-7) as f64;
    if y == 1 {
        -q.ln()
    } else {
        -(1.0 - q).ln()
    }
}

fn transfer_staging() -> Checks {
    let mut c = Checks::default();
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth::write_shape_manifest(&tmp.path().join("data"), 64, SIZE as u32, 7).unwrap();
    let plan = data::stratified_kfold(&manifest, 5, 7).unwrap();
    let splits = data::make_run_splits(&plan, &manifest, 0, 0.1, 7).unwrap();
    let weights = tmp.path().join("standin.tlw");
    synth::standin_weights(BACKBONE, SIZE, 10, 1e-3, 1, &weights).unwrap();
    let intermediate = synth::proxy_dataset(48, SIZE as u32, 5);
    let augmented = AugmentedSet::default();
    let data = RunData {
        manifest: &manifest,
        splits: &splits,
        augmented: &augmented,
        intermediate: Some(&intermediate),
        imagenet_weights: Some(&weights),
    };
    c.note(format!("{} train / {} val / {} test", splits.train_ids.len(), splits.val_ids.len(), splits.test_ids.len()));

    // (a) every strategy on a short budget
    let hp = staged_hp(2, 10);
    let mut finished = Vec::new();
    for strategy in Strategy::ALL {
        let u = strategy.needs_u().then_some(20);
        let cfg = config(strategy, u, &hp);
        let ok = match transfer::run_configuration(&cfg, &data, &hp, 3) {
            Ok(t) => {
                let scores = t.predict_test(&data, 16).map(|p| p.entries.iter().all(|e| e.score.is_finite()));
                t.phase_names() == strategy.phases() && matches!(scores, Ok(true))
            }
            Err(e) => {
                c.note(format!("{strategy}: {e}"));
                false
            }
        };
        if ok {
            finished.push(strategy.name());
        }
    }
    c.check(format!("(a) strategies completed: {}/7", finished.len()), finished.len() == 7);

    // (b) + (d) frozen backbone, head-only training
    let fresh = Classifier::build(BACKBONE, Some(SIZE), Some(&weights), &HeadSpec::default(), 0).unwrap();
    let hp_d = staged_hp(20, 20);
    let wft = transfer::run_configuration(&config(Strategy::ImgWft, None, &hp_d), &data, &hp_d, 1).unwrap();
    let n = fresh.backbone_layers;
    c.check(
        "(b) IMG_WFT backbone bitwise unchanged",
        wft.classifier.backbone_checksum(0..n) == fresh.backbone_checksum(0..n),
    );
    let peak = wft.history.iter().map(|e| e.train_acc).fold(0.0, f64::max);
    c.note(format!("IMG_WFT peak train acc {peak:.3} in {} epochs", wft.history.len()));
    c.check(format!("(d) IMG_WFT train acc {peak:.3} >= 0.90 within 20 epochs"), peak >= 0.90 && wft.history.len() <= 20);

    // (c) partial intermediate pretraining
    let (mut backbone, entry) = transfer::build_backbone(BACKBONE, Some(SIZE), Some(&weights), 0).unwrap();
    let total = backbone.graph.len();
    let u = 20;
    let head_before = backbone.checksum(0..total - u);
    let tail_before = backbone.checksum(total - u..total);
    transfer::pretrain_partial(&mut backbone, u, &intermediate, entry.preprocess, &staged_hp(2, 10), 4).unwrap();
    c.check(
        format!("(c) first N-U = {} layers bitwise unchanged", total - u),
        backbone.checksum(0..total - u) == head_before && backbone.graph.len() == total,
    );
    c.check("(c) last U layers trained", backbone.checksum(total - u..total) != tail_before);

    // (e) early stopping with patience 10
    let hp_e = staged_hp(60, 10);
    let t = transfer::run_configuration(&config(Strategy::ImgWft, None, &hp_e), &data, &hp_e, 2).unwrap();
    let best_acc = t.history[t.best_epoch].val_acc;
    let stopped_early = t.stopped_epoch + 1 < hp_e.max_epochs;
    let mut running_best = (0, f64::NEG_INFINITY);
    let mut schedule_ok = t.history.len() == t.stopped_epoch + 1;
    for (e, rec) in t.history.iter().enumerate() {
        if rec.val_acc > running_best.1 {
            running_best = (e, rec.val_acc);
        } else if e < t.stopped_epoch {
            schedule_ok &= e - running_best.0 < hp_e.patience;
        }
    }
    schedule_ok &= running_best.0 == t.best_epoch;
    c.note(format!("early stop: best {} stopped {}", t.best_epoch, t.stopped_epoch));
    c.check(
        format!("(e) stopped at epoch {} = best {} + patience 10", t.stopped_epoch, t.best_epoch),
        stopped_early && schedule_ok && t.stopped_epoch - t.best_epoch == hp_e.patience,
    );
    let val = transfer::predict_ids(&t.classifier, &manifest, &splits.val_ids, hp_e.batch_size).unwrap();
    let correct = val.entries.iter().filter(|e| (e.score >= 0.5) == (e.true_label == 1)).count();
    let acc = correct as f64 / val.entries.len() as f64;
    let loss = val.entries.iter().map(|e| bce(e.score, e.true_label as usize)).sum::<f64>() / val.entries.len() as f64;
    c.check(
        format!("(e) restored weights reproduce best epoch (acc {acc} vs {best_acc})"),
        acc == best_acc && (loss - t.history[t.best_epoch].val_loss).abs() <= 1e-5,
    );
    c
}

// ---------------------------------------------------------------- Grad-CAM

fn toy(act: Activation, seed: u64) -> Model {
    let mut b = GraphBuilder::new();
    let x = b.input([2, 6, 5]);
    let conv = b.node(
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
    let g = b.node(Op::GlobalAvgPool, &[conv], None);
    let d = b.node(
        Op::Dense(Dense {
            units: 1,
            bias: true,
            activation: Activation::Sigmoid,
        }),
        &[g],
        None,
    );
    let mut m = Model::init(b.build(d), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params.iter_mut().flatten() {
        p.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    m
}

/// conv(3x3, valid) -> GAP -> sigmoid evaluated by hand:
/// dp/dA_k(i,j) = p(1-p) w_k / HW for class 1, negated for class 0.
fn toy_cam(m: &Model, x: &[f32], class: usize, relu: bool) -> Vec<f64> {
    let (cin, h, w, oh, ow, f) = (2, 6, 5, 4, 3, 3);
    let (kern, bias) = (&m.params[1][0], &m.params[1][1]);
    let mut acts = vec![0.0f64; f * oh * ow];
    for k in 0..f {
        for y in 0..oh {
            for xx in 0..ow {
                let mut s = bias[k] as f64;
                for ci in 0..cin {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            s += kern[((k * cin + ci) * 3 + dy) * 3 + dx] as f64 * x[(ci * h + y + dy) * w + xx + dx] as f64;
                        }
                    }
                }
                acts[(k * oh + y) * ow + xx] = if relu { s.max(0.0) } else { s };
            }
        }
    }
    let (dw, db) = (&m.params[3][0], m.params[3][1][0] as f64);
    let plane = (oh * ow) as f64;
    let z = db + (0..f).map(|k| dw[k] as f64 * acts[k * oh * ow..(k + 1) * oh * ow].iter().sum::<f64>() / plane).sum::<f64>();
    let p = 1.0 / (1.0 + (-z).exp());
    let sign = if class == 1 { 1.0 } else { -1.0 };
    let mut cam = vec![0.0; oh * ow];
    for k in 0..f {
        let alpha = sign * p * (1.0 - p) * dw[k] as f64 / plane;
        for (i, v) in cam.iter_mut().enumerate() {
            *v += alpha * acts[k * oh * ow + i];
        }
    }
    let cam: Vec<f64> = cam.into_iter().map(|v| v.max(0.0)).collect();
    let top = cam.iter().copied().fold(0.0, f64::max);
    cam.into_iter().map(|v| if top > 0.0 { v / top } else { 0.0 }).collect()
}

fn conv3(b: &mut GraphBuilder, x: NodeId, filters: usize, name: &str) -> NodeId {
    b.node(
        Op::Conv(Conv2d {
            filters,
            kernel: (3, 3),
            stride: (1, 1),
            padding: Padding::Same,
            bias: true,
            activation: Activation::Relu,
        }),
        &[x],
        Some(name.into()),
    )
}

fn pool2(b: &mut GraphBuilder, x: NodeId) -> NodeId {
    b.node(
        Op::Pool(Pool2d {
            kind: PoolKind::Max,
            size: (2, 2),
            stride: (2, 2),
            padding: Padding::Valid,
        }),
        &[x],
        None,
    )
}

const CAM_SIZE: usize = 48;

/// Small blob-vs-ring CNN with a 12x12 final feature map.
fn locality_model() -> Model {
    let mut b = GraphBuilder::new();
    let x = b.input([3, CAM_SIZE, CAM_SIZE]);
    let c1 = conv3(&mut b, x, 8, "c1");
    let p1 = pool2(&mut b, c1);
    let c2 = conv3(&mut b, p1, 16, "c2");
    let p2 = pool2(&mut b, c2);
    let c3 = conv3(&mut b, p2, 16, "c3");
    let g = b.node(Op::GlobalAvgPool, &[c3], None);
    let d = b.node(
        Op::Dense(Dense {
            units: 1,
            bias: true,
            activation: Activation::Sigmoid,
        }),
        &[g],
        None,
    );
    let mut m = Model::init(b.build(d), 3);
    let train = synth::shape_dataset(128, CAM_SIZE as u32, 11);
    let p = Prepared::new(&train, CAM_SIZE, Preprocess::Tf).unwrap();
    let hp = TrainingHyperparams {
        batch_size: 16,
        ..Default::default()
    };
    transfer::train_epochs(&mut m, &p, 2, 3e-3, 15, &hp, 5).unwrap();
    m
}

fn normalized(h: &Heatmap) -> bool {
    h.grid.iter().all(|v| (0.0..=1.0).contains(v)) && (h.is_zero() || h.max() == 1.0)
}

fn grad_cam() -> Checks {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    let resnet = Classifier::build("ResNet50", None, None, &HeadSpec::default(), 0).unwrap();
    let img = noise_image(224, 224, &mut rng);
    let e = explain::explain_image(&resnet, "ResNet50", &img, None).unwrap();
    c.check(
        format!("ResNet50 grid {}x{} from {}", e.heatmap.height, e.heatmap.width, e.heatmap.source_layer),
        (e.heatmap.height, e.heatmap.width) == (7, 7) && e.heatmap.source_layer == "conv5_block3_out",
    );

    let model = locality_model();
    let layer = explain::final_conv_layer(&model.graph).unwrap();
    let input = |img: &RgbImage| {
        Tensor::from_vec([1, 3, CAM_SIZE, CAM_SIZE], transfer::prepare_image(img, CAM_SIZE, Preprocess::Tf))
    };
    let mut norm_ok = normalized(&e.heatmap);
    for _ in 0..100 {
        let x = input(&noise_image(CAM_SIZE as u32, CAM_SIZE as u32, &mut rng));
        for class in [0, 1] {
            norm_ok &= normalized(&explain::grad_cam(&model, &x, class, layer).unwrap());
        }
    }
    c.check("normalization invariant on 100 random inputs", norm_ok);

    let mut worst = 0.0f64;
    for (seed, act) in (1..=8).map(|s| (s, if s % 2 == 0 { Activation::Relu } else { Activation::Linear })) {
        let m = toy(act, seed);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
        let x: Vec<f32> = (0..60).map(|_| r.gen_range(-1.0..1.0)).collect();
        let t = Tensor::from_vec([1, 2, 6, 5], x.clone());
        let l = explain::final_conv_layer(&m.graph).unwrap();
        for class in [0, 1] {
            let got = explain::grad_cam(&m, &t, class, l).unwrap();
            let want = toy_cam(&m, &x, class, act == Activation::Relu);
            worst = got.grid.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    c.check(format!("toy closed form (max deviation {worst:.1e})"), worst <= 1e-6);

    let (mut blobs, mut local) = (0, 0);
    for s in synth::shapes(100, CAM_SIZE as u32, 99).iter().filter(|s| s.label == 1) {
        let x = input(&s.image);
        let p = model.forward(x.clone(), false, 0, false).take_output(&model.graph).data[0];
        if p < 0.5 {
            continue;
        }
        blobs += 1;
        let up = explain::upsample(&explain::grad_cam(&model, &x, 1, layer).unwrap(), CAM_SIZE, CAM_SIZE);
        let total: f64 = up.iter().sum();
        let (x0, y0, x1, y1) = s.bbox;
        let inside: f64 = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x))).map(|(y, x)| up[y as usize * CAM_SIZE + x as usize]).sum();
        local += usize::from(total > 0.0 && inside / total >= 0.6);
    }
    c.note(format!("locality {local}/{blobs}"));
    c.check(
        format!("locality: {local}/{blobs} correct blob maps with >=60% mass in the box"),
        blobs > 0 && local as f64 >= 0.8 * blobs as f64,
    );
    c
}

// ---------------------------------------------------------------- reporting

fn golden(name: &str, actual: &str) -> bool {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("TLBENCH_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    std::fs::read_to_string(&path).is_ok_and(|g| g == actual)
}

fn golden_cd_input() -> AccuracyMatrix {
    AccuracyMatrix::new(
        ["ResNet50-141-IMG_FTU", "DenseNet121-IMG_FFT", "MobileNetV2-IMG_WFT", "VGG16-HAM_FFT", "EfficientNetB0-NTL"]
            .map(String::from)
            .to_vec(),
        vec![
            vec![0.862, 0.848, 0.851, 0.839, 0.857],
            vec![0.845, 0.851, 0.838, 0.842, 0.849],
            vec![0.801, 0.812, 0.795, 0.808, 0.799],
            vec![0.781, 0.770, 0.792, 0.776, 0.785],
            vec![0.702, 0.695, 0.711, 0.689, 0.705],
        ],
    )
    .unwrap()
}

fn golden_bubbles() -> Vec<BubblePoint> {
    [
        ("VGG16", 30.7, 0.812, 14.72),
        ("ResNet50", 7.75, 0.8442, 23.59),
        ("MobileNetV3Small", 0.174, 0.763, 1.53),
        ("EfficientNetB0", 0.794, 0.829, 4.05),
    ]
    .map(|(model, flops_giga, accuracy, params_millions)| BubblePoint {
        model: model.to_string(),
        flops_giga,
        accuracy,
        params_millions,
    })
    .to_vec()
}

fn predictions(ids: &[(String, u8)], skill: f64, rng: &mut impl Rng) -> PredictionSet {
    PredictionSet::new(
        ids.iter()
            .map(|(id, y)| Prediction {
                image_id: id.clone(),
                true_label: *y,
                score: (f64::from(*y) * skill + rng.gen::<f64>() * (1.0 - skill)).clamp(0.0, 1.0),
            })
            .collect(),
    )
    .unwrap()
}

fn fake_store(root: &Path, rng: &mut impl Rng) -> ResultStore {
    let s = ResultStore::new(root);
    FoldPlan {
        k: 5,
        seed: 0,
        folds: vec![Vec::new(); 5],
    }
    .write_json(&s.path(store::FOLDPLAN_FILE))
    .unwrap();
    let ids: Vec<(String, u8)> = (0..40).map(|i| (format!("img{i}"), (i % 2) as u8)).collect();
    for (config, folds, skill) in [
        ("ResNet50-141-IMG_FTU", 5, 0.5),
        ("MobileNetV2-IMG_WFT", 5, 0.3),
        ("VGG16-IMG_FFT", 5, 0.4),
        ("DenseNet121-NTL", 3, 0.2),
    ] {
        for fold in 0..folds {
            let dir = s.run_dir(config, fold);
            std::fs::create_dir_all(&dir).unwrap();
            for f in store::RUN_ARTIFACTS {
                std::fs::write(dir.join(f), b"").unwrap();
            }
            let r = metrics::evaluate(&predictions(&ids, skill, rng)).unwrap();
            r.write_json(&dir.join(store::METRICS_FILE)).unwrap();
        }
    }
    let failed = s.run_dir("DenseNet121-NTL", 3);
    std::fs::create_dir_all(&failed).unwrap();
    std::fs::write(failed.join(store::ERROR_FILE), "{\"kind\":\"invalid\",\"message\":\"x\"}\n").unwrap();
    let rows: Vec<ComplexityReport> = ["ResNet50", "MobileNetV2", "VGG16", "DenseNet121"]
        .iter()
        .map(|name| {
            let mut r = complexity::report(name, &zoo::entry(name).unwrap().graph(), None);
            r.accel_mem_mb = 0.0;
            r
        })
        .collect();
    complexity::write_csv(&rows, std::fs::File::create(s.path(store::COMPLEXITY_FILE)).unwrap()).unwrap();
    s
}

const GENERATED: [&str; 8] = [
    store::SUMMARY_FILE,
    store::SUMMARY_ACCURACY_FILE,
    store::TABLE_CSV_FILE,
    store::TABLE_TEXT_FILE,
    store::CD_RESULT_FILE,
    store::CD_DIAGRAM_FILE,
    store::COMPLEXITY_TEXT_FILE,
    store::BUBBLE_CHART_FILE,
];

fn reporting() -> Checks {
    let mut c = Checks::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let (_, cd_svg) = stats::compare(&golden_cd_input(), 0.05).unwrap();
    c.check("CD diagram matches golden file", golden("cd_diagram.svg", &cd_svg));
    c.check(
        "bubble chart matches golden file",
        golden("bubble_chart.svg", &report::render_bubble_chart(&golden_bubbles())),
    );

    let tmp = tempfile::tempdir().unwrap();
    let s = fake_store(tmp.path(), &mut rng);
    store::regenerate(&s).unwrap();
    let first: Vec<Option<Vec<u8>>> = GENERATED.iter().map(|f| std::fs::read(s.path(f)).ok()).collect();
    c.check("regeneration writes every summary and figure", first.iter().all(Option::is_some));
    for f in GENERATED {
        let _ = std::fs::remove_file(s.path(f));
    }
    store::regenerate(&s).unwrap();
    let second: Vec<Option<Vec<u8>>> = GENERATED.iter().map(|f| std::fs::read(s.path(f)).ok()).collect();
    store::regenerate(&s).unwrap();
    let third: Vec<Option<Vec<u8>>> = GENERATED.iter().map(|f| std::fs::read(s.path(f)).ok()).collect();
    c.check("delete and regenerate is byte-identical", first == second && second == third);

    let records: Vec<ImageRecord> = (0..60)
        .map(|i| {
            let label = if i % 3 == 0 { POSITIVE } else { NEGATIVE };
            record(format!("{label}/x{i}"), label, PathBuf::from(format!("x{i}.png")))
        })
        .collect();
    let m = Manifest::new(records);
    let truth: Vec<(String, u8)> = m.records.iter().map(|r| (r.id.clone(), m.binary_label(&r.label))).collect();
    let sets: Vec<PredictionSet> = (0..5).map(|k| predictions(&truth, 0.25 + 0.05 * k as f64, &mut rng)).collect();
    let (reports, agg) = store::evaluate_ensemble(&sets, &m).unwrap();
    let accs: Vec<f64> = sets
        .iter()
        .map(|p| p.entries.iter().filter(|e| (e.score >= 0.5) == (e.true_label == 1)).count() as f64 / 60.0)
        .collect();
    let mean = accs.iter().sum::<f64>() / 5.0;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    let a = &agg.0["accuracy"];
    c.check(
        format!("5 sub-model reports -> one aggregate (accuracy {:.4} +- {:.4})", a.mean, a.std),
        reports.len() == 5
            && rel_close(a.mean, mean, 1e-12)
            && rel_close(a.std, std, 1e-12)
            && METRICS.iter().all(|k| agg.0.contains_key(*k)),
    );
    let mut short = sets[0].clone();
    let dropped = short.entries.remove(7).image_id;
    let named = matches!(store::evaluate_external(&short, &m), Err(tlbench::Error::MissingIds(ref ids)) if *ids == vec![dropped.clone()]);
    c.check(format!("missing id {dropped} is named"), named);
    c
}

// ---------------------------------------------------------------- driver

type Criterion = (&'static str, fn() -> Checks);

const CRITERIA: [Criterion; 9] = [
    ("parameter_counts", parameter_counts),
    ("flop_counts", flop_counts),
    ("metric_oracle", metric_oracle_suite),
    ("statistics_oracle", statistics_oracle),
    ("split_properties", split_properties),
    ("augmentation_properties", augmentation_properties),
    ("transfer_staging", transfer_staging),
    ("grad_cam", grad_cam),
    ("reporting", reporting),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(c) if c.passed() => {
                let notes = if c.notes.is_empty() { String::new() } else { format!("; {}", c.notes.join(", ")) };
                println!("PASS {name} ({} checks, {secs:.1}s{notes})", c.items.len());
            }
            Ok(c) => {
                failed += 1;
                let bad: Vec<&str> = c.items.iter().filter(|(_, ok)| !ok).map(|(w, _)| w.as_str()).collect();
                println!("FAIL {name} ({secs:.1}s): {}; {}", bad.join("; "), c.notes.join(", "));
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): panicked");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
