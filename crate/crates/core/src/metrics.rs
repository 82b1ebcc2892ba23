//! Confusion-matrix metrics, ROC/AUC and cross-fold aggregation.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const METRICS: [&str; 11] = [
    "accuracy",
    "sensitivity",
    "specificity",
    "precision",
    "npv",
    "mcc",
    "kappa",
    "lr_pos",
    "lr_neg",
    "f1",
    "auc",
];

/// Column headers used in rendered tables.
pub const METRIC_TITLES: [&str; 11] = [
    "Accuracy",
    "Sensitivity",
    "Specificity",
    "Precision",
    "NPV",
    "MCC",
    "Kappa",
    "LR+",
    "LR-",
    "F1-Score",
    "AUC",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub true_label: u8,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub entries: Vec<Prediction>,
    pub threshold: f64,
}

impl PredictionSet {
    pub fn new(entries: Vec<Prediction>) -> Result<PredictionSet> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !(0.0..=1.0).contains(&e.score) {
                return Err(Error::invalid(format!("score {} for {} outside [0,1]", e.score, e.image_id)));
            }
            if e.true_label > 1 {
                return Err(Error::invalid(format!("label {} for {} is not 0/1", e.true_label, e.image_id)));
            }
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::invalid(format!("duplicate prediction id {}", e.image_id)));
            }
        }
        Ok(PredictionSet { entries, threshold: 0.5 })
    }

    /// Builds a set from parallel label/score slices with ids `0..n`.
    pub fn from_scores(labels: &[u8], scores: &[f64]) -> Result<PredictionSet> {
        let entries = labels
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(i, (&l, &s))| Prediction { image_id: i.to_string(), true_label: l, score: s })
            .collect();
        PredictionSet::new(entries)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<PredictionSet> {
        let mut r = csv::Reader::from_path(path)?;
        let entries = r.deserialize().collect::<std::result::Result<Vec<Prediction>, _>>()?;
        PredictionSet::new(entries)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Predicted positive iff `score >= threshold`.
pub fn compute_confusion(p: &PredictionSet) -> Result<ConfusionMatrix> {
    if p.entries.is_empty() {
        return Err(Error::invalid("empty prediction set"));
    }
    let mut cm = ConfusionMatrix::default();
    for e in &p.entries {
        match (e.true_label == 1, e.score >= p.threshold) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fn_ += 1,
            (false, true) => cm.fp += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this are called positive; the first point uses +inf.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub npv: f64,
    pub mcc: f64,
    pub kappa: f64,
    /// Observed agreement.
    pub p_o: f64,
    /// Chance agreement.
    pub p_e: f64,
    /// Per category (positive, negative), counts by rater (truth, model).
    pub n_cr: [[u64; 2]; 2],
    /// `None` when specificity is 1.
    pub lr_pos: Option<f64>,
    /// `None` when specificity is 0.
    pub lr_neg: Option<f64>,
    pub f1: f64,
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub roc: Vec<RocPoint>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Scalar metrics from the confusion matrix. Zero denominators give 0,
/// except the likelihood ratios which become `None`.
pub fn compute_metric_report(cm: &ConfusionMatrix) -> MetricReport {
    let (tp, fp, tn, fn_) = (cm.tp as f64, cm.fp as f64, cm.tn as f64, cm.fn_ as f64);
    let n = tp + fp + tn + fn_;
    let sensitivity = ratio(tp, tp + fn_);
    let specificity = ratio(tn, tn + fp);
    let precision = ratio(tp, tp + fp);
    let npv = ratio(tn, tn + fn_);
    let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    let mcc = if den == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / den.sqrt() };
    let truth_pos = cm.tp + cm.fn_;
    let pred_pos = cm.tp + cm.fp;
    let n_cr = [[truth_pos, pred_pos], [cm.tn + cm.fp, cm.tn + cm.fn_]];
    let p_o = ratio(tp + tn, n);
    let p_e = ratio(
        n_cr[0][0] as f64 * n_cr[0][1] as f64 + n_cr[1][0] as f64 * n_cr[1][1] as f64,
        n * n,
    );
    let kappa = if p_e == 1.0 { 0.0 } else { (p_o - p_e) / (1.0 - p_e) };
    MetricReport {
        accuracy: p_o,
        sensitivity,
        specificity,
        precision,
        npv,
        mcc,
        kappa,
        p_o,
        p_e,
        n_cr,
        lr_pos: (specificity != 1.0).then(|| sensitivity / (1.0 - specificity)),
        lr_neg: (specificity != 0.0).then(|| (1.0 - sensitivity) / specificity),
        f1: ratio(2.0 * precision * sensitivity, precision + sensitivity),
        auc: None,
        confusion: *cm,
        roc: Vec::new(),
    }
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "accuracy" => Some(self.accuracy),
            "sensitivity" => Some(self.sensitivity),
            "specificity" => Some(self.specificity),
            "precision" => Some(self.precision),
            "npv" => Some(self.npv),
            "mcc" => Some(self.mcc),
            "kappa" => Some(self.kappa),
            "lr_pos" => self.lr_pos,
            "lr_neg" => self.lr_neg,
            "f1" => Some(self.f1),
            "auc" => self.auc,
            _ => None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut v = self.clone();
        v.roc.clear();
        let text = serde_json::to_string_pretty(&v)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<MetricReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write_roc_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.roc {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn class_counts(p: &PredictionSet) -> Result<(usize, usize)> {
    let pos = p.entries.iter().filter(|e| e.true_label == 1).count();
    let neg = p.entries.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC undefined: labels contain a single class"));
    }
    Ok((pos, neg))
}

/// ROC curve over every distinct score, and its trapezoidal area.
pub fn compute_roc_auc(p: &PredictionSet) -> Result<(Vec<RocPoint>, f64)> {
    let (pos, neg) = class_counts(p)?;
    let mut order: Vec<&Prediction> = p.entries.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area2 = 0u128;
    let mut i = 0;
    while i < order.len() {
        let s = order[i].score;
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && order[i].score == s {
            if order[i].true_label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in integer units of (1/neg) x (1/(2 pos))
        area2 += ((fp - fp0) * (tp + tp0)) as u128;
        points.push(RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64, threshold: s });
    }
    let auc = area2 as f64 / (2.0 * pos as f64 * neg as f64);
    Ok((points, auc))
}

/// P(random positive outscores random negative), ties counting one half.
pub fn pairwise_auc(p: &PredictionSet) -> Result<f64> {
    let (pos, neg) = class_counts(p)?;
    let mut twice = 0u64;
    for a in p.entries.iter().filter(|e| e.true_label == 1) {
        for b in p.entries.iter().filter(|e| e.true_label == 0) {
            twice += match a.score.partial_cmp(&b.score) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Full report: confusion metrics plus ROC and AUC when both classes occur.
pub fn evaluate(p: &PredictionSet) -> Result<MetricReport> {
    let cm = compute_confusion(p)?;
    let mut r = compute_metric_report(&cm);
    if let Ok((roc, auc)) = compute_roc_auc(p) {
        r.roc = roc;
        r.auc = Some(auc);
    }
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Per metric mean and sample standard deviation over folds. Metrics that
/// are undefined in some folds average over the folds where they exist;
/// metrics undefined everywhere are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldAggregate(pub BTreeMap<String, Stat>);

pub fn mean_std(xs: &[f64]) -> Stat {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Stat { mean, std }
}

pub fn aggregate_folds(reports: &[MetricReport]) -> Result<FoldAggregate> {
    if reports.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 fold reports, got {}", reports.len())));
    }
    let mut out = BTreeMap::new();
    for m in METRICS {
        let xs: Vec<f64> = reports.iter().filter_map(|r| r.get(m)).collect();
        if !xs.is_empty() {
            out.insert(m.to_string(), mean_std(&xs));
        }
    }
    Ok(FoldAggregate(out))
}

/// `summary.json`: config name to aggregate.
pub type Summary = BTreeMap<String, FoldAggregate>;

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
