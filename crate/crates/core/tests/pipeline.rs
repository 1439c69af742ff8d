//! End-to-end runs on a tiny synthetic MNIST-shaped dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use tldr::data::DatasetId;
use tldr::{classifier, generator};
use tldr::runner::{self, RunConfig, RunMode, RunReport};
use tldr::Error;

const TRAIN_PER_CLASS: usize = 24;
const TEST_PER_CLASS: usize = 4;

fn idx(dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut bytes = vec![0, 0, 0x08, dims.len() as u8];
    for d in dims {
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    bytes
}

/// Each class is a bright horizontal bar at its own height plus noise.
fn write_split(dir: &Path, prefix: &str, per_class: usize, rng: &mut ChaCha8Rng) {
    let n = 10 * per_class;
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 10;
        labels.push(class as u8);
        for y in 0..28 {
            for _ in 0..28 {
                let bar = y >= 2 + 2 * class && y < 4 + 2 * class;
                let v: u8 = if bar { rng.random_range(200..=255) } else { rng.random_range(0..40) };
                pixels.push(v);
            }
        }
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx(&[n as u32, 28, 28], &pixels)).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx(&[n as u32], &labels)).unwrap();
}

struct Fixture {
    _tmp: TempDir,
    data: PathBuf,
    runs: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let mnist = data.join("mnist");
    fs::create_dir_all(&mnist).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    write_split(&mnist, "train", TRAIN_PER_CLASS, &mut rng);
    write_split(&mnist, "t10k", TEST_PER_CLASS, &mut rng);
    let runs = tmp.path().join("runs");
    Fixture { _tmp: tmp, data, runs }
}

fn tiny(mode: RunMode) -> RunConfig {
    let mut cfg = RunConfig::default_for(DatasetId::Mnist, 100, mode);
    for (k, v) in [
        ("classifier.conv_blocks", "4/3/1"),
        ("classifier.fc_widths", "16, 10"),
        ("train.max_epochs", "2"),
        ("train.batch_size", "32"),
        ("generator.latent_dim", "8"),
        ("generator.base_channels", "4"),
        ("schedule.steps", "3"),
        ("schedule.batch_size", "8"),
        ("schedule.eval_interval", "2"),
        ("schedule.eval_count", "20"),
        ("eval.samples", "20"),
        ("eval.grid_columns", "2"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn invert_run_writes_every_artifact() {
    let f = fixture();
    let cfg = tiny(RunMode::Invert);
    let run = runner::run_experiment(&cfg, &f.data, &f.runs).unwrap();

    assert!(run.dir.starts_with(&f.runs));
    for file in [classifier::WEIGHTS_FILE, classifier::MANIFEST_FILE] {
        assert!(run.classifier_dir.join(file).exists(), "{file}");
    }
    for file in [generator::WEIGHTS_FILE, generator::MANIFEST_FILE] {
        assert!(run.generator_dir.join(file).exists(), "{file}");
    }
    assert!(run.grid.exists());
    let grid = image::open(&run.grid).unwrap();
    assert_eq!((grid.width(), grid.height()), (2 * 29 + 1, 10 * 29 + 1));

    let saved = RunConfig::parse(&fs::read_to_string(run.dir.join("config.txt")).unwrap()).unwrap();
    assert_eq!(saved, cfg);

    let lines: Vec<serde_json::Value> = fs::read_to_string(&run.metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0]["label_agreement"].is_null());
    assert!(lines[1]["label_agreement"].is_number());
    assert!(lines[2]["label_agreement"].is_number());
    for key in ["kl", "ce", "cosine", "ortho", "kl_pert", "ce_pert", "var", "pix", "grad", "total"] {
        assert!(lines[2]["losses"][key].is_number(), "missing {key}");
    }

    let parsed: RunReport = serde_json::from_value(report(&run.dir)).unwrap();
    assert_eq!(parsed.steps, 3);
    assert_eq!(parsed.subset_size, 100);
    assert_eq!(parsed.eval.samples, 20);
    assert_eq!(parsed.classifier_checksum.len(), 64);
}

#[test]
fn identical_configs_give_identical_reports() {
    let f = fixture();
    let cfg = tiny(RunMode::Reconstruct);
    let a = runner::run_experiment(&cfg, &f.data, &f.runs).unwrap();
    let b = runner::run_experiment(&cfg, &f.data, &f.runs).unwrap();
    assert_ne!(a.dir, b.dir);
    assert_eq!(report(&a.dir), report(&b.dir));
    assert_eq!(
        fs::read_to_string(&a.metrics).unwrap(),
        fs::read_to_string(&b.metrics).unwrap()
    );
}

#[test]
fn reconstruct_run_logs_the_added_terms() {
    let f = fixture();
    let run = runner::run_experiment(&tiny(RunMode::Reconstruct), &f.data, &f.runs).unwrap();
    let last: serde_json::Value = serde_json::from_str(
        fs::read_to_string(&run.metrics).unwrap().lines().last().unwrap(),
    )
    .unwrap();
    assert!(last["losses"]["grad"].as_f64().unwrap() > 0.0);
    assert!(last["losses"]["var"].as_f64().unwrap() > 0.0);
    assert!(last["losses"]["ce_pert"].as_f64().unwrap() > 0.0);
}

#[test]
fn evaluate_run_reproduces_the_stored_evaluation() {
    let f = fixture();
    let run = runner::run_experiment(&tiny(RunMode::Invert), &f.data, &f.runs).unwrap();
    let (eval, out) = runner::evaluate_run(&run.dir, &f.data).unwrap();
    assert!(out.starts_with(&run.dir));
    assert!(out.file_name().unwrap().to_str().unwrap().starts_with("eval-"));
    assert!(out.join("report.json").exists());
    assert!(out.join("grid.png").exists());
    assert_eq!(
        serde_json::to_value(&eval).unwrap(),
        serde_json::to_value(&run.report.eval).unwrap()
    );
}

#[test]
fn sweep_shares_one_classifier_per_size() {
    let f = fixture();
    let runs = runner::sweep(&tiny(RunMode::Invert), &[50, 100], &[1, 2], &f.data, &f.runs).unwrap();
    assert_eq!(runs.len(), 4);
    assert_eq!(fs::read_dir(&f.runs).unwrap().count(), 4);
    let checksum = |i: usize| runs[i].report.classifier_checksum.clone();
    assert_eq!(checksum(0), checksum(1));
    assert_eq!(checksum(2), checksum(3));
    assert_ne!(checksum(0), checksum(2));
    assert_eq!(runs[1].config.seeds.generator, 2);
    assert_eq!(runs[2].config.subset_size, 100);
}

#[test]
fn render_grid_lays_out_one_column_per_run() {
    let f = fixture();
    let a = runner::run_experiment(&tiny(RunMode::Invert), &f.data, &f.runs).unwrap();
    let b = runner::run_experiment(&tiny(RunMode::Reconstruct), &f.data, &f.runs).unwrap();
    let out = f.runs.join("both.png");
    runner::render_runs_grid(&[a.dir.clone(), b.dir.clone()], 5, 3, &out).unwrap();
    let img = image::open(&out).unwrap();
    assert_eq!((img.width(), img.height()), (2 * 29 + 1, 10 * 29 + 1));

    let single = f.runs.join("single.png");
    runner::render_runs_grid(&[a.dir], 5, 3, &single).unwrap();
    assert_eq!(image::open(&single).unwrap().width(), 5 * 29 + 1);
}

#[test]
fn missing_dataset_fails_in_the_data_stage() {
    let f = fixture();
    let empty = f.data.join("nowhere");
    let err = runner::run_experiment(&tiny(RunMode::Invert), &empty, &f.runs).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "data", .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    let dirs: Vec<_> = fs::read_dir(&f.runs).unwrap().collect();
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].as_ref().unwrap().path().join("config.txt").exists());
}

#[test]
fn mismatched_checkpoint_is_a_config_error() {
    let f = fixture();
    let first = runner::run_experiment(&tiny(RunMode::Invert), &f.data, &f.runs).unwrap();
    let mut cfg = tiny(RunMode::Invert);
    cfg.set("classifier.fc_widths", "32, 10").unwrap();
    cfg.classifier_checkpoint = Some(first.classifier_dir.clone());
    let err = runner::run_experiment(&cfg, &f.data, &f.runs).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "train-classifier", .. }), "{err}");
    assert_eq!(err.exit_code(), 2);

    let mut reuse = tiny(RunMode::Reconstruct);
    reuse.classifier_checkpoint = Some(first.classifier_dir);
    let second = runner::run_experiment(&reuse, &f.data, &f.runs).unwrap();
    assert_eq!(second.report.classifier_checksum, first.report.classifier_checksum);
}

#[test]
fn invalid_config_is_rejected_before_any_output() {
    let f = fixture();
    let mut cfg = tiny(RunMode::Reconstruct);
    cfg.perturbation.epsilon = 2.0;
    let err = runner::run_experiment(&cfg, &f.data, &f.runs).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!f.runs.exists() || fs::read_dir(&f.runs).unwrap().count() == 0);
}
