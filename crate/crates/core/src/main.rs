use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tlbench::augment::{self, AugmentationSpec};
use tlbench::config::RunConfig;
use tlbench::data::{self, FoldPlan, Labeling, Manifest, NEGATIVE, POSITIVE};
use tlbench::metrics::{MetricReport, PredictionSet};
use tlbench::stats::{self, AccuracyMatrix};
use tlbench::store::{self, ErrorRecord, ResultStore};
use tlbench::transfer::{self, TrainingHyperparams};
use tlbench::{complexity, explain, synth, zoo, Error, Result};

#[derive(Parser)]
#[command(name = "tlbench", version, about = "Transfer-learning benchmark harness for two-class image sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan class directories into a manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "manifest.csv")]
        out: PathBuf,
        /// Drop near-duplicates within this dHash Hamming distance.
        #[arg(long)]
        dedup: Option<u32>,
        #[arg(long, default_value = POSITIVE)]
        positive_dir: String,
        #[arg(long, default_value = NEGATIVE)]
        negative_dir: String,
    },
    /// Stratified k-fold plan.
    Split {
        #[arg(long, default_value = "manifest.csv")]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "foldplan.json")]
        out: PathBuf,
    },
    /// Expand one fold's training images.
    Augment {
        #[arg(long, default_value = "manifest.csv")]
        manifest: PathBuf,
        #[arg(long, default_value = "foldplan.json")]
        foldplan: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        expansion: Option<usize>,
        /// Override every op's probability.
        #[arg(long)]
        probability: Option<f32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every (configuration x fold) of a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score prediction files or saved runs against a manifest.
    Evaluate {
        #[arg(long, default_value = "manifest.csv")]
        manifest: PathBuf,
        #[arg(long, num_args = 1.., required_unless_present = "model")]
        predictions: Vec<PathBuf>,
        /// Run directories holding weights and config.json.
        #[arg(long, num_args = 1.., conflicts_with = "predictions")]
        model: Vec<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Friedman test, Nemenyi CD and CD diagram from `model,fold,accuracy` rows.
    Compare {
        #[arg(long, default_value = "summary_accuracy.csv")]
        accuracy: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Parameter, FLOP and (optionally) runtime profile per backbone.
    Profile {
        /// Comma separated; every registry backbone when omitted.
        #[arg(long, value_delimiter = ',')]
        backbones: Vec<String>,
        #[arg(long)]
        input_size: Option<usize>,
        /// Also time training epochs and single-image inference.
        #[arg(long)]
        runtime: bool,
        #[arg(long, default_value_t = complexity::INFERENCE_REPS)]
        reps: usize,
        #[arg(long, default_value = "complexity.csv")]
        out: PathBuf,
    },
    /// Grad-CAM overlays and raw grids for images.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        image: Vec<PathBuf>,
        /// Class to explain; the predicted class when omitted.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Regenerate summaries, tables and figures of a result store.
    Report {
        #[arg(long)]
        store: PathBuf,
        /// Copied into the store before regeneration.
        #[arg(long)]
        complexity: Option<PathBuf>,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

#[derive(serde::Serialize)]
struct EvaluationOutput {
    reports: Vec<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    aggregate: Option<tlbench::metrics::FoldAggregate>,
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Ingest {
            root,
            out,
            dedup,
            positive_dir,
            negative_dir,
        } => {
            let labeling = Labeling {
                dirs: [(positive_dir, POSITIVE.to_string()), (negative_dir, NEGATIVE.to_string())],
            };
            let (mut m, report) = data::ingest_directory(&root, &labeling)?;
            for p in &report.skipped {
                eprintln!("skipped {}", p.display());
            }
            if let Some(t) = dedup {
                m = data::dedup(&m, t);
            }
            m.write_csv(&out)?;
            println!("{} images -> {}", m.len(), out.display());
        }
        Command::Split { manifest, k, seed, out } => {
            let m = Manifest::read_csv(&manifest)?;
            data::stratified_kfold(&m, k, seed)?.write_json(&out)?;
            println!("{k} folds -> {}", out.display());
        }
        Command::Augment {
            manifest,
            foldplan,
            fold,
            val_fraction,
            seed,
            expansion,
            probability,
            out,
        } => {
            let m = Manifest::read_csv(&manifest)?;
            let plan = FoldPlan::read_json(&foldplan)?;
            let splits = data::make_run_splits(&plan, &m, fold, val_fraction, seed)?;
            let mut spec = AugmentationSpec::standard();
            if let Some(p) = probability {
                spec = spec.with_probability(p);
            }
            if let Some(e) = expansion {
                spec.expansion_factor = e;
            }
            let set = augment::expand(&splits.train_ids, &m, &spec, seed, &out)?;
            set.write_lineage(&out.join(store::LINEAGE_FILE))?;
            println!("{} images -> {}", set.items.len(), out.display());
        }
        Command::Train { config, jobs } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = store::train(&cfg, jobs, &|msg| eprintln!("{msg}"))?;
            for f in &outcome.failures {
                eprintln!("{}", serde_json::to_string(f)?);
            }
            println!(
                "{} runs complete, {} failed -> {}",
                outcome.completed,
                outcome.failures.len(),
                outcome.root.display()
            );
            return Ok(outcome.failures.is_empty());
        }
        Command::Evaluate {
            manifest,
            predictions,
            model,
            batch,
            out,
        } => {
            let m = Manifest::read_csv(&manifest)?;
            let sets: Vec<PredictionSet> = if model.is_empty() {
                predictions.iter().map(|p| PredictionSet::read_csv(p)).collect::<Result<_>>()?
            } else {
                let ids: Vec<String> = m.records.iter().map(|r| r.id.clone()).collect();
                model
                    .iter()
                    .map(|dir| {
                        let (_, c) = transfer::load_run(dir)?;
                        transfer::predict_ids(&c, &m, &ids, batch)
                    })
                    .collect::<Result<_>>()?
            };
            let output = if sets.len() > 1 {
                let (reports, agg) = store::evaluate_ensemble(&sets, &m)?;
                EvaluationOutput {
                    reports,
                    aggregate: Some(agg),
                }
            } else {
                EvaluationOutput {
                    reports: vec![store::evaluate_external(&sets[0], &m)?],
                    aggregate: None,
                }
            };
            let text = json(&output)?;
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Compare { accuracy, alpha, out } => {
            let a = AccuracyMatrix::read_csv(&accuracy)?;
            let (cmp, svg) = stats::compare(&a, alpha)?;
            write_text(&out.join(store::CD_RESULT_FILE), &json(&cmp)?)?;
            write_text(&out.join(store::CD_DIAGRAM_FILE), &svg)?;
            println!(
                "Friedman {:.4} (p = {:.6}), CD = {:.4}",
                cmp.friedman.statistic, cmp.friedman.p_value, cmp.cd.critical_difference
            );
        }
        Command::Profile {
            backbones,
            input_size,
            runtime,
            reps,
            out,
        } => {
            let names: Vec<String> = if backbones.is_empty() {
                zoo::names().into_iter().map(String::from).collect()
            } else {
                backbones
            };
            let mut rows = Vec::new();
            for name in &names {
                let e = zoo::entry(name)?;
                let size = input_size.unwrap_or(e.input_size);
                let graph = e.graph_at(size);
                let profile = if runtime { Some(profile_runtime(name, size, reps, &out)?) } else { None };
                rows.push(complexity::report(name, &graph, profile.as_ref()));
                eprintln!("profiled {name}");
            }
            let path = &out;
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            complexity::write_csv(&rows, file)?;
            println!("{} backbones -> {}", rows.len(), path.display());
        }
        Command::Explain {
            model,
            image,
            target,
            out,
        } => {
            let (cfg, c) = transfer::load_run(&model)?;
            for path in &image {
                let img = data::load_image(path)?.to_rgb8();
                let e = explain::explain_image(&c, &cfg.backbone.name, &img, target)?;
                let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let (png, _) = explain::write_explanation(&out, &id, &e)?;
                println!(
                    "{} p={:.4} class={} layer={} -> {}",
                    path.display(),
                    e.probability,
                    e.heatmap.target_class,
                    e.heatmap.source_layer,
                    png.display()
                );
            }
        }
        Command::Report { store: root, complexity } => {
            let s = ResultStore::new(root);
            if let Some(cx) = complexity {
                let dst = s.path(store::COMPLEXITY_FILE);
                std::fs::copy(&cx, &dst).map_err(|e| Error::io(&cx, e))?;
            }
            let r = store::regenerate(&s)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} configurations ({} complete) -> {}",
                r.configs,
                r.complete_configs,
                s.root.display()
            );
        }
    }
    Ok(true)
}

/// Times training epochs on synthetic images and single-image inference
/// for a randomly initialised classifier.
fn profile_runtime(name: &str, size: usize, reps: usize, out: &Path) -> Result<complexity::RuntimeProfile> {
    let hp = TrainingHyperparams::default();
    let mut c = transfer::Classifier::build(name, Some(size), None, &hp.head, 0)?;
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).join(".profile");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let artifact = dir.join(format!("{name}.tlw"));
    tlbench::nn::weights::save(&c.model, &artifact)?;
    let ds = synth::shape_dataset(hp.batch_size, size as u32, 0);
    let prepared = transfer::Prepared::new(&ds, size, c.preprocess)?;
    let x = prepared.batch(&[0])?;
    let graph = c.model.graph.clone();
    let model = &mut c.model;
    let mut epoch = 0;
    let train = complexity::time_reps(0, complexity::TRAIN_EPOCHS, || {
        epoch += 1;
        transfer::train_epochs(model, &prepared, 2, hp.lr_head, 1, &hp, epoch).map(|_| ())
    })?;
    let inference = complexity::time_reps(complexity::INFERENCE_WARMUP, reps, || {
        let _ = model.forward(x.clone(), false, 0, false);
        Ok(())
    })?;
    let disk_bytes = std::fs::metadata(&artifact).map_err(|e| Error::io(&artifact, e))?.len();
    Ok(complexity::RuntimeProfile {
        train,
        inference,
        disk_bytes,
        memory_bytes: complexity::memory_footprint_bytes(&graph),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let rec = ErrorRecord::new(&e, None, None);
            eprintln!("{}", serde_json::to_string(&rec).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(1)
        }
    }
}
