//! Run directories, orchestration and grid rendering.
//!
//! A run directory holds everything needed to re-evaluate it:
//!
//! ```text
//! runs/<run_id>/
//!   config.txt          configuration snapshot
//!   classifier/         classifier.safetensors + classifier.json
//!   generator/          generator.safetensors + generator.json
//!   metrics.jsonl       one loss record per training step
//!   report.json         evaluation report
//!   grid.png            rows = classes, columns = samples
//! ```
//!
//! Re-evaluation writes into a fresh `eval-<timestamp>/` subdirectory and
//! leaves the training artifacts untouched.

mod config;
mod grid;

pub use config::{EvalConfig, RunConfig, RunMode, RunSeeds};
pub use grid::{render_grid, save_grid};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{train_classifier, FrozenClassifier, TrainMetrics};
use crate::data::{class_balanced_subset, load_dataset, LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_batch, generate_balanced, EvalReport};
use crate::generator::Generator;
use crate::inversion::{train_inversion, MetricRecord, TrainOutput};
use crate::reconstruction::train_reconstruction;

pub const RUNS_ROOT_ENV: &str = "TLDR_RUNS_ROOT";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const GRID_FILE: &str = "grid.png";
pub const CLASSIFIER_DIR: &str = "classifier";
pub const GENERATOR_DIR: &str = "generator";

/// Resolves the runs root: explicit value, then `TLDR_RUNS_ROOT`, then `./runs`.
pub fn runs_root(configured: Option<&Path>) -> PathBuf {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUNS_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub subset_size: usize,
    pub mode: RunMode,
    pub classifier: TrainMetrics,
    pub classifier_checksum: String,
    pub steps: usize,
    /// Label agreement logged after the final training step.
    pub final_agreement: f64,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub run_id: String,
    pub dir: PathBuf,
    pub config: RunConfig,
    pub classifier_dir: PathBuf,
    pub generator_dir: PathBuf,
    pub metrics: PathBuf,
    pub report: RunReport,
    pub grid: PathBuf,
}

/// First 12 hex digits of the config hash, then the creation time.
pub fn run_id(config: &RunConfig, now: SystemTime) -> String {
    let digest = Sha256::digest(config.to_text().as_bytes());
    let stamp = now.duration_since(UNIX_EPOCH).unwrap_or_default();
    format!("{}-{}{:03}", &hex::encode(digest)[..12], stamp.as_secs(), stamp.subsec_millis())
}

/// Creates a new, previously absent run directory under `root`.
fn create_run_dir(root: &Path, config: &RunConfig) -> Result<(String, PathBuf)> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let base = run_id(config, SystemTime::now());
    for attempt in 0.. {
        let id = if attempt == 0 { base.clone() } else { format!("{base}-{attempt}") };
        let dir = root.join(&id);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok((id, dir)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("attempt counter is unbounded")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_metrics(path: &Path, log: &[MetricRecord]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for record in log {
        let line = serde_json::to_string(record)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Loads the class-balanced training subset a config refers to.
pub fn load_subset(config: &RunConfig, data_root: &Path) -> Result<LabeledImageSet> {
    let full = load_dataset(data_root, config.dataset, Split::Train)?;
    class_balanced_subset(&full, config.subset_size, config.seeds.data)
}

/// Trains the configured classifier on `subset`, scoring it on the test split
/// when that split is available.
pub fn fit_classifier(config: &RunConfig, subset: &LabeledImageSet, data_root: &Path) -> Result<FrozenClassifier> {
    let test = match load_dataset(data_root, config.dataset, Split::Test) {
        Ok(t) => Some(t),
        Err(e) => {
            log::warn!("no test split, skipping test accuracy: {e}");
            None
        }
    };
    train_classifier(&config.classifier, subset, test.as_ref(), &config.train, config.seeds.classifier)
}

fn obtain_classifier(config: &RunConfig, subset: &LabeledImageSet, data_root: &Path) -> Result<FrozenClassifier> {
    match &config.classifier_checkpoint {
        Some(dir) => {
            let (clf, manifest) = FrozenClassifier::load(dir)?;
            if manifest.spec != config.classifier {
                return Err(Error::Config(format!(
                    "checkpoint {} was built from a different classifier spec",
                    dir.display()
                )));
            }
            Ok(clf)
        }
        None => fit_classifier(config, subset, data_root),
    }
}

/// Trains (or reuses) a classifier, trains a generator against it, evaluates
/// and renders. Stage failures are tagged with the stage name; artifacts
/// written before the failure stay on disk.
pub fn run_experiment(config: &RunConfig, data_root: &Path, runs_root: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    let (run_id, dir) = create_run_dir(runs_root, config)?;
    log::info!("run {run_id} in {}", dir.display());
    write_file(&dir.join(CONFIG_FILE), config.to_text().as_bytes())?;

    let subset = load_subset(config, data_root).map_err(|e| e.in_stage("data"))?;
    let classifier_dir = dir.join(CLASSIFIER_DIR);
    let clf = obtain_classifier(config, &subset, data_root)
        .and_then(|clf| {
            clf.save(
                &classifier_dir,
                config.dataset.as_str(),
                config.subset_size,
                config.seeds.classifier,
                &config.train,
            )?;
            Ok(clf)
        })
        .map_err(|e| e.in_stage("train-classifier"))?;
    let checksum = clf.checksum();

    let stage = config.mode.as_str();
    let TrainOutput {
        generator,
        log,
        final_agreement,
    } = match config.mode {
        RunMode::Invert => train_inversion(
            &clf,
            &config.generator,
            &config.weights,
            &config.schedule,
            config.seeds.train_seeds(),
        ),
        RunMode::Reconstruct => train_reconstruction(
            &clf,
            &config.generator,
            &config.weights,
            &config.perturbation,
            &config.schedule,
            config.seeds.train_seeds(),
        ),
    }
    .map_err(|e| e.in_stage(stage))?;
    let metrics = dir.join(METRICS_FILE);
    let generator_dir = dir.join(GENERATOR_DIR);
    write_metrics(&metrics, &log)
        .and_then(|_| generator.save(&generator_dir, config.schedule.steps, config.seeds.generator))
        .map_err(|e| e.in_stage("save"))?;
    if clf.checksum() != checksum {
        return Err(Error::Training {
            stage: "classifier checksum",
            index: config.schedule.steps,
            reason: format!("classifier weights changed during {stage}"),
            breakdown: None,
        }
        .in_stage("verify"));
    }

    let (eval, grid) = evaluate_into(config, &clf, &generator, &subset, &dir).map_err(|e| e.in_stage("evaluate"))?;
    let report = RunReport {
        dataset: config.dataset.to_string(),
        subset_size: config.subset_size,
        mode: config.mode,
        classifier: clf.metrics().clone(),
        classifier_checksum: checksum,
        steps: config.schedule.steps,
        final_agreement,
        eval,
    };
    write_file(&dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?.as_bytes())
        .map_err(|e| e.in_stage("evaluate"))?;
    Ok(RunArtifacts {
        run_id,
        config: config.clone(),
        classifier_dir,
        generator_dir,
        metrics,
        report,
        grid,
        dir,
    })
}

/// Writes the grid image into `dir` and returns the evaluation report.
fn evaluate_into(
    config: &RunConfig,
    clf: &FrozenClassifier,
    gen: &Generator,
    subset: &LabeledImageSet,
    dir: &Path,
) -> Result<(EvalReport, PathBuf)> {
    let hot = config.mode.hot();
    let batch = generate_balanced(gen, config.eval.samples, config.eval.seed, hot)?;
    let eval = evaluate_batch(clf, &batch, subset)?;
    let grid_batch = generate_balanced(gen, config.eval.grid_columns * clf.num_classes(), config.eval.seed, hot)?;
    let grid = dir.join(GRID_FILE);
    save_grid(&grid, &grid_batch.images, &grid_batch.labels, clf.num_classes(), config.eval.grid_columns)?;
    Ok((eval, grid))
}

/// Artifacts of a finished run loaded back from disk.
pub struct LoadedRun {
    pub config: RunConfig,
    pub classifier: FrozenClassifier,
    pub generator: Generator,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config = RunConfig::parse(&text)?;
    let (classifier, _) = FrozenClassifier::load(&dir.join(CLASSIFIER_DIR))?;
    let (generator, _) = Generator::load(&dir.join(GENERATOR_DIR))?;
    Ok(LoadedRun {
        config,
        classifier,
        generator,
    })
}

/// Re-evaluates a finished run into a new `eval-<timestamp>/` subdirectory.
pub fn evaluate_run(dir: &Path, data_root: &Path) -> Result<(EvalReport, PathBuf)> {
    let run = load_run(dir).map_err(|e| e.in_stage("load"))?;
    let subset = load_subset(&run.config, data_root).map_err(|e| e.in_stage("data"))?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    let out = dir.join(format!("eval-{}{:03}", stamp.as_secs(), stamp.subsec_millis()));
    fs::create_dir(&out).map_err(|e| Error::io(&out, e))?;
    let (eval, _) = evaluate_into(&run.config, &run.classifier, &run.generator, &subset, &out)
        .map_err(|e| e.in_stage("evaluate"))?;
    write_file(&out.join(REPORT_FILE), serde_json::to_string_pretty(&eval)?.as_bytes())?;
    Ok((eval, out))
}

/// Grid with one row per class. A single run contributes `columns` samples
/// per class; several runs contribute one column each, in the order given.
pub fn render_runs_grid(runs: &[PathBuf], columns: usize, seed: u64, out: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Argument("render_runs_grid needs at least one run".into()));
    }
    let per_run = if runs.len() == 1 { columns } else { 1 };
    let mut images = Vec::with_capacity(runs.len());
    let mut labels = Vec::new();
    let mut classes = 0;
    for dir in runs {
        let run = load_run(dir)?;
        classes = run.classifier.num_classes();
        let batch = generate_balanced(&run.generator, per_run * classes, seed, run.config.mode.hot())?;
        images.push(batch.images);
        labels.extend(batch.labels);
    }
    save_grid(out, &tch::Tensor::cat(&images, 0), &labels, classes, per_run * runs.len())
}

/// One run per `(subset size, generator seed)` pair. The classifier for each
/// size is trained once and shared by that size's generators.
pub fn sweep(
    base: &RunConfig,
    sizes: &[usize],
    generator_seeds: &[u64],
    data_root: &Path,
    runs_root: &Path,
) -> Result<Vec<RunArtifacts>> {
    if sizes.is_empty() || generator_seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one size and one seed".into()));
    }
    let mut runs = Vec::with_capacity(sizes.len() * generator_seeds.len());
    for &size in sizes {
        let mut shared: Option<PathBuf> = base.classifier_checkpoint.clone();
        for &seed in generator_seeds {
            let mut cfg = base.clone();
            cfg.subset_size = size;
            cfg.classifier_checkpoint = shared.clone();
            cfg.seeds.generator = seed;
            cfg.seeds.conditions = seed.wrapping_add(1);
            let run = run_experiment(&cfg, data_root, runs_root)?;
            shared.get_or_insert_with(|| run.classifier_dir.clone());
            runs.push(run);
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetId;

    #[test]
    fn run_ids_hash_the_config() {
        let a = RunConfig::default_for(DatasetId::Mnist, 1000, RunMode::Invert);
        let mut b = a.clone();
        b.seeds.generator += 1;
        let t = UNIX_EPOCH + std::time::Duration::from_millis(1_700_000_000_123);
        assert_eq!(run_id(&a, t), run_id(&a, t));
        assert_ne!(run_id(&a, t)[..12], run_id(&b, t)[..12]);
        assert!(run_id(&a, t).ends_with("-1700000000123"));
    }

    #[test]
    fn run_dirs_never_collide() {
        let root = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default_for(DatasetId::Mnist, 1000, RunMode::Invert);
        let dirs: Vec<_> = (0..3).map(|_| create_run_dir(root.path(), &cfg).unwrap().1).collect();
        assert_ne!(dirs[0], dirs[1]);
        assert_ne!(dirs[1], dirs[2]);
    }
}
