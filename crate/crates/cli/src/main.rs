use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tldr::data::{class_balanced_subset, data_root, load_dataset, DatasetId, Split};
use tldr::runner::{self, RunConfig, RunMode};
use tldr::{Error, Result};

#[derive(Parser)]
#[command(name = "tldr", version, about = "Classifier inversion and training-data reconstruction with conditioned generators")]
struct Cli {
    /// Dataset root [env: TLDR_DATA_ROOT, default: ./data]
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Directory for run outputs [env: TLDR_RUNS_ROOT, default: ./runs]
    #[arg(long, global = true)]
    runs_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier on a class-balanced subset and save it.
    TrainClassifier(TrainClassifierArgs),
    /// Train an inversion generator against a classifier.
    Invert(RunArgs),
    /// Train a reconstruction generator against a classifier.
    Reconstruct(RunArgs),
    /// Re-evaluate a finished run into a new eval-* subdirectory.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Render a class-by-sample grid from one run, or one column per run.
    RenderGrid(RenderArgs),
    /// Run every (subset size, generator seed) pair.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long, default_value = "mnist")]
    dataset: String,
    #[arg(long, default_value_t = 1000)]
    subset_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Output directory [default: <runs-root>/classifiers/<dataset>-<size>-s<seed>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file in the dotted key = value format.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    subset_size: Option<usize>,
    /// Base seed for data, classifier, generator and conditions.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Reuse a saved classifier directory instead of training one.
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Run directory; repeat to lay out one column per run.
    #[arg(long, required = true)]
    run: Vec<PathBuf>,
    /// Samples per class when a single run is given.
    #[arg(long, default_value_t = 8)]
    columns: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "invert")]
    mode: String,
    #[arg(long, value_delimiter = ',', default_value = "1000,10000,60000")]
    sizes: Vec<usize>,
    /// Number of generators per size.
    #[arg(long, default_value_t = 3)]
    generators: u64,
}

fn resolve_config(args: &ConfigArgs, mode: RunMode) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let cfg = RunConfig::parse(&text)?;
            if cfg.mode != mode {
                return Err(Error::Config(format!(
                    "{} is a {} config, not {mode}",
                    path.display(),
                    cfg.mode
                )));
            }
            if let Some(d) = &args.dataset {
                if d.parse::<DatasetId>()? != cfg.dataset {
                    return Err(Error::Config(format!("--dataset {d} conflicts with the config file")));
                }
            }
            cfg
        }
        None => {
            let dataset = args.dataset.as_deref().unwrap_or("mnist").parse()?;
            RunConfig::default_for(dataset, 1000, mode)
        }
    };
    if let Some(size) = args.subset_size {
        cfg.subset_size = size;
    }
    if let Some(seed) = args.seed {
        cfg.seeds = runner::RunSeeds::new(seed);
        cfg.perturbation.seed = seed.wrapping_add(4);
    }
    if let Some(steps) = args.steps {
        cfg.schedule.steps = steps;
    }
    if let Some(dir) = &args.classifier {
        cfg.classifier_checkpoint = Some(dir.clone());
    }
    for item in &args.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train_classifier(args: &TrainClassifierArgs, data: &Path, runs: &Path) -> Result<()> {
    let dataset: DatasetId = args.dataset.parse()?;
    let mut cfg = RunConfig::default_for(dataset, args.subset_size, RunMode::Invert);
    cfg.seeds = runner::RunSeeds::new(args.seed);
    if let Some(epochs) = args.max_epochs {
        cfg.train.max_epochs = epochs;
    }
    cfg.validate()?;
    let out = args.out.clone().unwrap_or_else(|| {
        runs.join("classifiers")
            .join(format!("{dataset}-{}-s{}", args.subset_size, args.seed))
    });
    let full = load_dataset(data, dataset, Split::Train)?;
    let subset = class_balanced_subset(&full, args.subset_size, cfg.seeds.data)?;
    let clf = runner::fit_classifier(&cfg, &subset, data)?;
    clf.save(&out, dataset.as_str(), args.subset_size, cfg.seeds.classifier, &cfg.train)?;
    eprintln!("saved classifier to {}", out.display());
    print_json(clf.metrics())
}

fn render(args: &RenderArgs) -> Result<()> {
    runner::render_runs_grid(&args.run, args.columns, args.seed, &args.out)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let data = data_root(cli.data_root.as_deref());
    let runs = runner::runs_root(cli.runs_root.as_deref());
    match cli.command {
        Command::TrainClassifier(args) => train_classifier(&args, &data, &runs),
        Command::Invert(args) => experiment(&args, RunMode::Invert, &data, &runs),
        Command::Reconstruct(args) => experiment(&args, RunMode::Reconstruct, &data, &runs),
        Command::Evaluate { run } => {
            let (report, out) = runner::evaluate_run(&run, &data)?;
            eprintln!("wrote {}", out.display());
            print_json(&report)
        }
        Command::RenderGrid(args) => render(&args),
        Command::Sweep(args) => {
            let mode: RunMode = args.mode.parse()?;
            let base = resolve_config(&args.config, mode)?;
            let seeds: Vec<u64> = (0..args.generators).map(|i| base.seeds.generator + i).collect();
            let runs = runner::sweep(&base, &args.sizes, &seeds, &data, &runs)?;
            for r in &runs {
                println!("{}\t{}\t{}", r.dir.display(), r.config.subset_size, r.config.seeds.generator);
            }
            Ok(())
        }
    }
}

fn experiment(args: &RunArgs, mode: RunMode, data: &Path, runs: &Path) -> Result<()> {
    let cfg = resolve_config(&args.config, mode)?;
    if args.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let artifacts = runner::run_experiment(&cfg, data, runs)?;
    eprintln!("run {} written to {}", artifacts.run_id, artifacts.dir.display());
    print_json(&artifacts.report)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                log::error!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
