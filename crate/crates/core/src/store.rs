//! On-disk result store and the end-to-end training driver.
//!
//! ```text
//! <output_dir>/<run_id>/
//!   run_config.txt  manifest.csv  foldplan.json
//!   splits/<fold>.json
//!   augmented/<fold>/<source_id>_<replica>.png + lineage.csv
//!   searches/<backbone>-<strategy>.json
//!   runs/<config>/<fold>/   weights.tlw history.csv phases.json config.json
//!                           predictions.csv metrics.json roc.csv
//!                           (or error.json alone when the run failed)
//!   summary.json  summary_accuracy.csv  table_metrics.csv  table_metrics.txt
//!   cd_result.json  cd_diagram.svg
//!   complexity.csv  table_complexity.txt  bubble_chart.svg
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentationSpec, AugmentedSet};
use crate::config::{RunConfig, UChoice};
use crate::data::{self, FoldPlan, Labeling, Manifest, SplitAssignment};
use crate::metrics::{self, MetricReport, PredictionSet, Summary};
use crate::report::{self, TableRow};
use crate::stats::{self, AccuracyMatrix};
use crate::transfer::{self, Dataset, RunData, Strategy, TransferConfig, PREDICTIONS_FILE};
use crate::zoo::WeightSource;
use crate::{complexity, Error, Result};

pub const RUN_CONFIG_FILE: &str = "run_config.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const FOLDPLAN_FILE: &str = "foldplan.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const ROC_FILE: &str = "roc.csv";
pub const ERROR_FILE: &str = "error.json";
pub const LINEAGE_FILE: &str = "lineage.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SUMMARY_ACCURACY_FILE: &str = "summary_accuracy.csv";
pub const TABLE_CSV_FILE: &str = "table_metrics.csv";
pub const TABLE_TEXT_FILE: &str = "table_metrics.txt";
pub const CD_RESULT_FILE: &str = "cd_result.json";
pub const CD_DIAGRAM_FILE: &str = "cd_diagram.svg";
pub const COMPLEXITY_FILE: &str = "complexity.csv";
pub const COMPLEXITY_TEXT_FILE: &str = "table_complexity.txt";
pub const BUBBLE_CHART_FILE: &str = "bubble_chart.svg";

/// Files every successful run directory holds.
pub const RUN_ARTIFACTS: [&str; 7] = [
    transfer::WEIGHTS_FILE,
    transfer::HISTORY_FILE,
    transfer::PHASES_FILE,
    transfer::CONFIG_FILE,
    PREDICTIONS_FILE,
    METRICS_FILE,
    ROC_FILE,
];

/// Alpha used for the CD diagram in regenerated reports.
pub const REPORT_ALPHA: f64 = 0.05;

/// Machine-readable failure record, written as `error.json` and printed by
/// the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
}

impl ErrorRecord {
    pub fn new(e: &Error, config: Option<String>, fold: Option<usize>) -> ErrorRecord {
        ErrorRecord {
            kind: e.kind().to_string(),
            message: e.to_string(),
            config,
            fold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Complete,
    Failed,
    /// Neither a full artifact set nor an error record.
    Partial,
}

#[derive(Clone, Debug)]
pub struct RunEntry {
    pub config: String,
    pub fold: usize,
    pub dir: PathBuf,
    pub status: RunStatus,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ResultStore {
    pub root: PathBuf,
}

impl ResultStore {
    pub fn new(root: impl Into<PathBuf>) -> ResultStore {
        ResultStore { root: root.into() }
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run_dir(&self, config: &str, fold: usize) -> PathBuf {
        self.runs_dir().join(config).join(fold.to_string())
    }

    pub fn augmented_dir(&self, fold: usize) -> PathBuf {
        self.root.join("augmented").join(fold.to_string())
    }

    /// Run directories in config then fold order; `*.partial` leftovers are
    /// reported as partial under their fold.
    pub fn runs(&self) -> Result<Vec<RunEntry>> {
        let mut out = Vec::new();
        for cdir in sorted_dirs(&self.runs_dir())? {
            let config = cdir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let mut folds = Vec::new();
            for fdir in sorted_dirs(&cdir)? {
                let name = fdir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let (num, partial) = match name.strip_suffix(".partial") {
                    Some(n) => (n, true),
                    None => (name.as_str(), false),
                };
                let Ok(fold) = num.parse::<usize>() else { continue };
                let status = if partial {
                    RunStatus::Partial
                } else if fdir.join(ERROR_FILE).is_file() {
                    RunStatus::Failed
                } else if RUN_ARTIFACTS.iter().all(|f| fdir.join(f).is_file()) {
                    RunStatus::Complete
                } else {
                    RunStatus::Partial
                };
                folds.push(RunEntry {
                    config: config.clone(),
                    fold,
                    dir: fdir,
                    status,
                });
            }
            folds.sort_by_key(|r| r.fold);
            out.extend(folds);
        }
        Ok(out)
    }

    fn expected_folds(&self, runs: &[RunEntry]) -> Result<usize> {
        let plan = self.path(FOLDPLAN_FILE);
        if plan.is_file() {
            return Ok(FoldPlan::read_json(&plan)?.k);
        }
        Ok(runs.iter().map(|r| r.fold + 1).max().unwrap_or(0))
    }
}

/// Outcome of [`regenerate`].
#[derive(Clone, Debug, Default)]
pub struct Regenerated {
    pub configs: usize,
    pub complete_configs: usize,
    pub warnings: Vec<String>,
}

/// Rebuilds every summary, table and figure from the run directories (and
/// `complexity.csv` when present). Output depends only on those files.
pub fn regenerate(store: &ResultStore) -> Result<Regenerated> {
    let runs = store.runs()?;
    let k = store.expected_folds(&runs)?;
    let mut reports: BTreeMap<String, Vec<MetricReport>> = BTreeMap::new();
    let mut out = Regenerated::default();
    for r in runs.iter().filter(|r| r.status == RunStatus::Complete) {
        reports
            .entry(r.config.clone())
            .or_default()
            .push(MetricReport::read_json(&r.dir.join(METRICS_FILE))?);
    }
    let mut summary = Summary::new();
    let mut folds = BTreeMap::new();
    for (config, rs) in &reports {
        folds.insert(config.clone(), rs.len());
        match metrics::aggregate_folds(rs) {
            Ok(agg) => {
                summary.insert(config.clone(), agg);
            }
            Err(e) => out.warnings.push(format!("{config}: {e}")),
        }
    }
    out.configs = summary.len();
    metrics::write_summary(&summary, &store.path(SUMMARY_FILE))?;

    let complete: Vec<(&String, &Vec<MetricReport>)> = reports.iter().filter(|(_, rs)| rs.len() == k).collect();
    out.complete_configs = complete.len();
    let mut w = csv::Writer::from_path(store.path(SUMMARY_ACCURACY_FILE))?;
    w.write_record(["model", "fold", "accuracy"])?;
    for (config, rs) in &complete {
        for (fold, r) in rs.iter().enumerate() {
            w.write_record([config.as_str(), &fold.to_string(), &r.accuracy.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(store.path(SUMMARY_ACCURACY_FILE), e))?;

    let rows = TableRow::from_summary(&summary, &folds, k);
    let table_csv = store.path(TABLE_CSV_FILE);
    std::fs::write(&table_csv, report::metrics_csv(&rows)?).map_err(|e| Error::io(&table_csv, e))?;
    let table_txt = store.path(TABLE_TEXT_FILE);
    std::fs::write(&table_txt, report::metrics_text(&rows)).map_err(|e| Error::io(&table_txt, e))?;

    if complete.len() >= 2 && k >= 2 {
        let matrix = AccuracyMatrix::new(
            complete.iter().map(|(c, _)| c.to_string()).collect(),
            complete.iter().map(|(_, rs)| rs.iter().map(|r| r.accuracy).collect()).collect(),
        )?;
        let (cmp, svg) = stats::compare(&matrix, REPORT_ALPHA)?;
        write_json(&cmp, &store.path(CD_RESULT_FILE))?;
        let p = store.path(CD_DIAGRAM_FILE);
        std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
    } else {
        out.warnings
            .push(format!("{} complete configuration(s); CD diagram needs at least 2", complete.len()));
    }

    let cx = store.path(COMPLEXITY_FILE);
    if cx.is_file() {
        let rows = complexity::read_csv(&cx)?;
        let p = store.path(COMPLEXITY_TEXT_FILE);
        std::fs::write(&p, report::complexity_text(&rows)).map_err(|e| Error::io(&p, e))?;
        let (points, warnings) = report::bubble_points(&summary, &rows);
        out.warnings.extend(warnings);
        let p = store.path(BUBBLE_CHART_FILE);
        std::fs::write(&p, report::render_bubble_chart(&points)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(out)
}

/// Full metric report over `manifest` for one prediction set. Truth comes
/// from the manifest; ids outside the manifest are ignored; any manifest id
/// without a prediction is an error naming it.
pub fn evaluate_external(predictions: &PredictionSet, manifest: &Manifest) -> Result<MetricReport> {
    let by_id: BTreeMap<&str, f64> = predictions.entries.iter().map(|e| (e.image_id.as_str(), e.score)).collect();
    let missing: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| !by_id.contains_key(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let entries = manifest
        .records
        .iter()
        .map(|r| metrics::Prediction {
            image_id: r.id.clone(),
            true_label: manifest.binary_label(&r.label),
            score: by_id[r.id.as_str()],
        })
        .collect();
    metrics::evaluate(&PredictionSet::new(entries)?)
}

/// One report per prediction set plus their mean ± std.
pub fn evaluate_ensemble(sets: &[PredictionSet], manifest: &Manifest) -> Result<(Vec<MetricReport>, metrics::FoldAggregate)> {
    let reports = sets.iter().map(|p| evaluate_external(p, manifest)).collect::<Result<Vec<_>>>()?;
    let agg = metrics::aggregate_folds(&reports)?;
    Ok((reports, agg))
}

/// Writes a run's artifacts into a staging directory and renames it into
/// place; on failure the run directory holds only `error.json`.
fn execute_run(
    store: &ResultStore,
    label: &str,
    fold: usize,
    body: impl FnOnce(&Path) -> Result<()>,
) -> std::result::Result<(), ErrorRecord> {
    let dir = store.run_dir(label, fold);
    let staging = dir.with_extension("partial");
    let record = |e: &Error| ErrorRecord::new(e, Some(label.to_string()), Some(fold));
    let attempt = (|| -> Result<()> {
        for d in [&dir, &staging] {
            if d.exists() {
                std::fs::remove_dir_all(d).map_err(|e| Error::io(d.as_path(), e))?;
            }
        }
        mkdir(&staging)?;
        body(&staging)?;
        std::fs::rename(&staging, &dir).map_err(|e| Error::io(&dir, e))
    })();
    match attempt {
        Ok(()) => Ok(()),
        Err(e) => {
            let rec = record(&e);
            let _ = std::fs::remove_dir_all(&staging);
            let _ = std::fs::remove_dir_all(&dir);
            if mkdir(&dir).is_ok() {
                let _ = write_json(&rec, &dir.join(ERROR_FILE));
            }
            Err(rec)
        }
    }
}

/// Trains, predicts and scores one configuration on one fold into `dir`.
pub fn train_one(cfg: &TransferConfig, data: &RunData, hp: &transfer::TrainingHyperparams, seed: u64, dir: &Path) -> Result<MetricReport> {
    let trained = transfer::run_configuration(cfg, data, hp, seed)?;
    trained.write_artifacts(dir)?;
    let preds = trained.predict_test(data, hp.batch_size)?;
    preds.write_csv(&dir.join(PREDICTIONS_FILE))?;
    let report = metrics::evaluate(&preds)?;
    report.write_json(&dir.join(METRICS_FILE))?;
    report.write_roc_csv(&dir.join(ROC_FILE))?;
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub root: PathBuf,
    pub completed: usize,
    pub failures: Vec<ErrorRecord>,
}

struct Job {
    label: String,
    cfg: Option<TransferConfig>,
    /// Set when the configuration could not be built (e.g. a failed U search).
    setup_error: Option<ErrorRecord>,
    fold: usize,
}

fn weight_source(s: Strategy) -> WeightSource {
    if s.uses_imagenet() {
        WeightSource::Imagenet
    } else {
        WeightSource::None
    }
}

/// Runs the whole pipeline for a configuration: ingest, split, augment,
/// U searches, then (configuration x fold) runs on `jobs` worker threads,
/// then report regeneration.
pub fn train(config: &RunConfig, jobs: usize, log: &(dyn Fn(&str) + Sync)) -> Result<TrainOutcome> {
    let store = ResultStore::new(config.store_root());
    mkdir(&store.root)?;
    let cfg_copy = store.path(RUN_CONFIG_FILE);
    std::fs::write(&cfg_copy, &config.source).map_err(|e| Error::io(&cfg_copy, e))?;
    log(&format!("run {} -> {}", config.run_id(), store.root.display()));

    let (mut manifest, ingest) = data::ingest_directory(&config.dataset_root, &Labeling::default())?;
    for p in &ingest.skipped {
        log(&format!("skipped undecodable {}", p.display()));
    }
    if let Some(t) = config.dedup_threshold {
        manifest = data::dedup(&manifest, t);
    }
    manifest.write_csv(&store.path(MANIFEST_FILE))?;
    let plan = data::stratified_kfold(&manifest, config.folds, config.seed)?;
    plan.write_json(&store.path(FOLDPLAN_FILE))?;

    let splits_dir = store.root.join("splits");
    mkdir(&splits_dir)?;
    let mut splits: Vec<SplitAssignment> = Vec::with_capacity(plan.k);
    let mut augmented: Vec<AugmentedSet> = Vec::with_capacity(plan.k);
    let mut spec = AugmentationSpec::standard();
    if let Some(f) = config.expansion_factor {
        spec.expansion_factor = f;
    }
    for fold in 0..plan.k {
        let s = data::make_run_splits(&plan, &manifest, fold, config.val_fraction, config.seed)?;
        write_json(&s, &splits_dir.join(format!("{fold}.json")))?;
        let aug = if config.augment {
            let dir = store.augmented_dir(fold);
            let lineage = dir.join(LINEAGE_FILE);
            if lineage.is_file() {
                AugmentedSet::read_lineage(&lineage)?
            } else {
                log(&format!("augmenting fold {fold}"));
                let a = augment::expand(&s.train_ids, &manifest, &spec, config.seed.wrapping_add(fold as u64), &dir)?;
                a.write_lineage(&lineage)?;
                a
            }
        } else {
            AugmentedSet::default()
        };
        splits.push(s);
        augmented.push(aug);
    }

    let intermediate = if config.strategies.iter().any(|s| s.uses_intermediate()) {
        let root = config.intermediate_root.as_deref().expect("validated");
        Some(Dataset::from_class_dirs(root)?)
    } else {
        None
    };
    let weights: BTreeMap<&str, Option<PathBuf>> =
        config.backbones.iter().map(|b| (b.as_str(), config.weights_for(b))).collect();
    let data_for = |backbone: &str, fold: usize| RunData {
        manifest: &manifest,
        splits: &splits[fold],
        augmented: &augmented[fold],
        intermediate: intermediate.as_ref(),
        imagenet_weights: weights[backbone].as_deref(),
    };

    let mut jobs_list = Vec::new();
    let searches = store.root.join("searches");
    for backbone in &config.backbones {
        for &strategy in &config.strategies {
            let built = (|| -> Result<TransferConfig> {
                let desc = transfer::descriptor_for(backbone, &config.hp, weight_source(strategy))?;
                let u = match config.u_for(strategy, backbone).filter(|_| strategy.needs_u()) {
                    None => None,
                    Some(UChoice::Fixed(u)) => Some(*u),
                    Some(UChoice::Grid(grid)) => {
                        log(&format!("searching U for {backbone} {strategy} over {grid:?}"));
                        let search =
                            transfer::search_unfreeze_depth(strategy, &desc, grid, &data_for(backbone, 0), &config.hp, config.seed);
                        mkdir(&searches)?;
                        let path = searches.join(format!("{backbone}-{strategy}.json"));
                        match search {
                            Ok(s) => {
                                write_json(&s, &path)?;
                                Some(s.best_u)
                            }
                            Err(e) => {
                                write_json(&ErrorRecord::new(&e, None, Some(0)), &path)?;
                                return Err(e);
                            }
                        }
                    }
                };
                TransferConfig::new(strategy, u, desc)
            })();
            for fold in 0..plan.k {
                jobs_list.push(match &built {
                    Ok(cfg) => Job {
                        label: cfg.label(),
                        cfg: Some(cfg.clone()),
                        setup_error: None,
                        fold,
                    },
                    Err(e) => {
                        let label = format!("{backbone}-{strategy}");
                        Job {
                            setup_error: Some(ErrorRecord::new(e, Some(label.clone()), Some(fold))),
                            label,
                            cfg: None,
                            fold,
                        }
                    }
                });
            }
        }
    }

    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    let completed = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs_list.get(i) else { break };
                let result = execute_run(&store, &job.label, job.fold, |dir| {
                    if let Some(rec) = &job.setup_error {
                        return Err(Error::invalid(format!("{}: {}", rec.kind, rec.message)));
                    }
                    let cfg = job.cfg.as_ref().expect("config or setup error");
                    let seed = config.seed.wrapping_add(job.fold as u64);
                    train_one(cfg, &data_for(&cfg.backbone.name, job.fold), &config.hp, seed, dir).map(|_| ())
                });
                match result {
                    Ok(()) => {
                        completed.fetch_add(1, Ordering::SeqCst);
                        log(&format!("done {} fold {}", job.label, job.fold));
                    }
                    Err(rec) => {
                        log(&format!("failed {} fold {}: {}", job.label, job.fold, rec.message));
                        failures.lock().expect("failure list").push(rec);
                    }
                }
            });
        }
    });

    let regen = regenerate(&store)?;
    for w in &regen.warnings {
        log(&format!("warning: {w}"));
    }
    let mut failures = failures.into_inner().expect("failure list");
    failures.sort_by(|a, b| (&a.config, a.fold).cmp(&(&b.config, b.fold)));
    Ok(TrainOutcome {
        root: store.root,
        completed: completed.into_inner(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Prediction;

    fn manifest(ids: &[(&str, &str)]) -> Manifest {
        Manifest::new(
            ids.iter()
                .map(|(id, label)| data::ImageRecord {
                    id: id.to_string(),
                    path: PathBuf::from(format!("{id}.png")),
                    label: label.to_string(),
                    source: "test".into(),
                    phash: 0,
                })
                .collect(),
        )
    }

    fn preds(entries: &[(&str, f64)]) -> PredictionSet {
        PredictionSet::new(
            entries
                .iter()
                .map(|(id, s)| Prediction {
                    image_id: id.to_string(),
                    true_label: 0,
                    score: *s,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn external_truth_comes_from_manifest() {
        let m = manifest(&[("EM/a", "EM"), ("EM/b", "EM"), ("Confuser/c", "Confuser"), ("Confuser/d", "Confuser")]);
        let r = evaluate_external(&preds(&[("EM/a", 1.0), ("EM/b", 1.0), ("Confuser/c", 0.0), ("Confuser/d", 0.0), ("x", 0.3)]), &m).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.auc, Some(1.0));
    }

    #[test]
    fn external_missing_id_is_named() {
        let m = manifest(&[("EM/a", "EM"), ("Confuser/c", "Confuser")]);
        match evaluate_external(&preds(&[("EM/a", 0.9)]), &m) {
            Err(Error::MissingIds(ids)) => assert_eq!(ids, vec!["Confuser/c".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn failed_run_leaves_only_error_record() {
        let tmp = tempfile::tempdir().unwrap();
        let store = ResultStore::new(tmp.path());
        let err = execute_run(&store, "X-NTL", 2, |dir| {
            std::fs::write(dir.join("weights.tlw"), b"half").unwrap();
            Err(Error::invalid("boom"))
        })
        .unwrap_err();
        assert_eq!(err.kind, "invalid");
        let dir = store.run_dir("X-NTL", 2);
        let files: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(files, vec![std::ffi::OsString::from(ERROR_FILE)]);
        let runs = store.runs().unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].status, RunStatus::Failed);
    }
}
