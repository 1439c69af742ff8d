//! Run configuration and its text format.
//!
//! One `key = value` pair per line with dotted keys; `#` starts a comment
//! and blank lines are ignored. `dataset` and `mode` select the defaults,
//! every other key overrides one field:
//!
//! ```text
//! dataset = mnist
//! subset_size = 1000
//! mode = invert                      # or reconstruct
//! classifier.conv_blocks = 32/3/1, 64/3/1, 128/3/1   # channels/kernel/stride
//! classifier.fc_widths = 256, 10
//! classifier.input_shape = 1, 28, 28
//! classifier.checkpoint = runs/abc/classifier         # optional reuse
//! train.learning_rate = 0.001
//! generator.mode = vector_matrix
//! weights.gamma = 0.1
//! perturbation.epsilon = 0.05
//! schedule.steps = 20000
//! seeds.generator = 2
//! eval.samples = 512
//! ```
//!
//! [`RunConfig::to_text`] writes every key, so a written file reproduces the
//! configuration exactly.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierSpec, ConvBlockSpec, TrainHyper};
use crate::conditioning::ConditioningMode;
use crate::data::DatasetId;
use crate::error::{Error, Result};
use crate::generator::GeneratorSpec;
use crate::inversion::{LossWeights, Schedule, TrainSeeds};
use crate::reconstruction::PerturbationConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Invert,
    Reconstruct,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Invert => "invert",
            RunMode::Reconstruct => "reconstruct",
        }
    }

    /// Reconstruction conditions on one-hot targets.
    pub fn hot(self) -> bool {
        self == RunMode::Reconstruct
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invert" => Ok(RunMode::Invert),
            "reconstruct" => Ok(RunMode::Reconstruct),
            _ => Err(Error::Config(format!("unknown mode `{s}` (expected invert or reconstruct)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub data: u64,
    pub classifier: u64,
    pub generator: u64,
    pub conditions: u64,
}

impl RunSeeds {
    pub fn new(seed: u64) -> Self {
        Self {
            data: seed,
            classifier: seed.wrapping_add(1),
            generator: seed.wrapping_add(2),
            conditions: seed.wrapping_add(3),
        }
    }

    pub fn train_seeds(&self) -> TrainSeeds {
        TrainSeeds {
            generator: self.generator,
            conditions: self.conditions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Class-balanced generations scored in the report.
    pub samples: usize,
    /// Samples per class row in the grid image.
    pub grid_columns: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 512,
            grid_columns: 8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetId,
    pub subset_size: usize,
    pub mode: RunMode,
    pub classifier: ClassifierSpec,
    pub train: TrainHyper,
    /// Directory of a saved classifier to reuse instead of training one.
    pub classifier_checkpoint: Option<PathBuf>,
    pub generator: GeneratorSpec,
    pub weights: LossWeights,
    pub perturbation: PerturbationConfig,
    pub schedule: Schedule,
    pub seeds: RunSeeds,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn default_for(dataset: DatasetId, subset_size: usize, mode: RunMode) -> Self {
        let shape = dataset.image_shape();
        let n = dataset.num_classes();
        let seeds = RunSeeds::new(0);
        Self {
            dataset,
            subset_size,
            mode,
            classifier: ClassifierSpec::default_for(shape, n),
            train: TrainHyper::default(),
            classifier_checkpoint: None,
            generator: GeneratorSpec::default_for(shape, n),
            weights: match mode {
                RunMode::Invert => LossWeights::inversion(),
                RunMode::Reconstruct => LossWeights::reconstruction(),
            },
            perturbation: PerturbationConfig {
                seed: seeds.conditions.wrapping_add(1),
                ..Default::default()
            },
            schedule: Schedule::default(),
            seeds,
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subset_size == 0 {
            return Err(Error::Config("subset_size must be positive".into()));
        }
        let shape = self.dataset.image_shape();
        let n = self.dataset.num_classes();
        if self.classifier.input_shape != shape || self.classifier.num_classes != n {
            return Err(Error::Config(format!(
                "classifier expects {:?} over {} classes but {} has {shape:?} over {n}",
                self.classifier.input_shape, self.classifier.num_classes, self.dataset
            )));
        }
        self.classifier.validate()?;
        self.generator.validate()?;
        if self.generator.out_shape != shape || self.generator.num_classes != n {
            return Err(Error::Config(format!(
                "generator produces {:?} over {} classes but {} has {shape:?} over {n}",
                self.generator.out_shape, self.generator.num_classes, self.dataset
            )));
        }
        match self.mode {
            RunMode::Invert => self.weights.validate_inversion()?,
            RunMode::Reconstruct => self.weights.validate()?,
        }
        self.perturbation
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.schedule.validate()?;
        if self.train.batch_size == 0 || self.train.max_epochs == 0 || !(self.train.learning_rate > 0.0) {
            return Err(Error::Config(format!("invalid classifier training settings {:?}", self.train)));
        }
        if self.eval.samples < self.dataset.num_classes() || self.eval.grid_columns == 0 {
            return Err(Error::Config(
                "eval.samples must cover every class and eval.grid_columns must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.entries() {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.classifier;
        let g = &self.generator;
        let w = &self.weights;
        let s = &self.schedule;
        let t = &self.train;
        let blocks = c
            .conv_blocks
            .iter()
            .map(|b| format!("{}/{}/{}", b.out_channels, b.kernel, b.stride))
            .collect::<Vec<_>>()
            .join(", ");
        let mut e = vec![
            ("dataset", self.dataset.to_string()),
            ("subset_size", self.subset_size.to_string()),
            ("mode", self.mode.to_string()),
            ("classifier.conv_blocks", blocks),
            ("classifier.fc_widths", list(&c.fc_widths)),
            ("classifier.dropout_rate", c.dropout_rate.to_string()),
            ("classifier.leaky_slope", c.leaky_slope.to_string()),
            ("classifier.num_classes", c.num_classes.to_string()),
            ("classifier.input_shape", shape(c.input_shape)),
        ];
        if let Some(p) = &self.classifier_checkpoint {
            e.push(("classifier.checkpoint", p.display().to_string()));
        }
        e.extend([
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.plateau_tolerance", t.plateau_tolerance.to_string()),
            ("generator.latent_dim", g.latent_dim.to_string()),
            ("generator.base_channels", g.base_channels.to_string()),
            ("generator.dropout_rate", g.dropout_rate.to_string()),
            ("generator.mode", g.mode.to_string()),
            ("generator.num_classes", g.num_classes.to_string()),
            ("generator.out_shape", shape(g.out_shape)),
            ("weights.alpha", w.alpha.to_string()),
            ("weights.alpha_p", w.alpha_p.to_string()),
            ("weights.beta", w.beta.to_string()),
            ("weights.beta_p", w.beta_p.to_string()),
            ("weights.gamma", w.gamma.to_string()),
            ("weights.delta", w.delta.to_string()),
            ("weights.eta1", w.eta1.to_string()),
            ("weights.eta2", w.eta2.to_string()),
            ("weights.eta3", w.eta3.to_string()),
            ("perturbation.epsilon", self.perturbation.epsilon.to_string()),
            ("perturbation.seed", self.perturbation.seed.to_string()),
            ("schedule.steps", s.steps.to_string()),
            ("schedule.batch_size", s.batch_size.to_string()),
            ("schedule.learning_rate", s.learning_rate.to_string()),
            ("schedule.beta1", s.beta1.to_string()),
            ("schedule.beta2", s.beta2.to_string()),
            ("schedule.eval_interval", s.eval_interval.to_string()),
            ("schedule.eval_count", s.eval_count.to_string()),
            ("seeds.data", self.seeds.data.to_string()),
            ("seeds.classifier", self.seeds.classifier.to_string()),
            ("seeds.generator", self.seeds.generator.to_string()),
            ("seeds.conditions", self.seeds.conditions.to_string()),
            ("eval.samples", self.eval.samples.to_string()),
            ("eval.grid_columns", self.eval.grid_columns.to_string()),
            ("eval.seed", self.eval.seed.to_string()),
        ]);
        e
    }

    /// Parses the text format; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if pairs.insert(key.clone(), (lineno + 1, value)).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        let mut take = |key: &str| pairs.remove(key);
        let dataset: DatasetId = take("dataset")
            .ok_or_else(|| Error::Config("missing required key `dataset`".into()))?
            .1
            .parse()?;
        let mode: RunMode = match take("mode") {
            Some((_, v)) => v.parse()?,
            None => RunMode::Invert,
        };
        let subset_size = match take("subset_size") {
            Some((line, v)) => num(line, "subset_size", &v)?,
            None => 1000,
        };
        let mut cfg = Self::default_for(dataset, subset_size, mode);
        for (key, (line, v)) in pairs {
            cfg.set(&key, &v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    /// Overrides one field by its dotted key. `dataset` and `mode` pick the
    /// defaults and can only be given to [`RunConfig::parse`].
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let c = &mut self.classifier;
        let g = &mut self.generator;
        let w = &mut self.weights;
        let s = &mut self.schedule;
        let t = &mut self.train;
        match key {
            "dataset" | "mode" => {
                return Err(Error::Config(format!("`{key}` selects the defaults and cannot be overridden")));
            }
            "subset_size" => self.subset_size = num(0, key, v)?,
            "classifier.conv_blocks" => c.conv_blocks = conv_blocks(v)?,
            "classifier.fc_widths" => c.fc_widths = num_list(key, v)?,
            "classifier.dropout_rate" => c.dropout_rate = num(0, key, v)?,
            "classifier.leaky_slope" => c.leaky_slope = num(0, key, v)?,
            "classifier.num_classes" => c.num_classes = num(0, key, v)?,
            "classifier.input_shape" => c.input_shape = parse_shape(key, v)?,
            "classifier.checkpoint" => {
                self.classifier_checkpoint = (!v.is_empty()).then(|| PathBuf::from(v));
            }
            "train.learning_rate" => t.learning_rate = num(0, key, v)?,
            "train.batch_size" => t.batch_size = num(0, key, v)?,
            "train.max_epochs" => t.max_epochs = num(0, key, v)?,
            "train.patience" => t.patience = num(0, key, v)?,
            "train.plateau_tolerance" => t.plateau_tolerance = num(0, key, v)?,
            "generator.latent_dim" => g.latent_dim = num(0, key, v)?,
            "generator.base_channels" => g.base_channels = num(0, key, v)?,
            "generator.dropout_rate" => g.dropout_rate = num(0, key, v)?,
            "generator.mode" => g.mode = v.parse::<ConditioningMode>()?,
            "generator.num_classes" => g.num_classes = num(0, key, v)?,
            "generator.out_shape" => g.out_shape = parse_shape(key, v)?,
            "weights.alpha" => w.alpha = num(0, key, v)?,
            "weights.alpha_p" => w.alpha_p = num(0, key, v)?,
            "weights.beta" => w.beta = num(0, key, v)?,
            "weights.beta_p" => w.beta_p = num(0, key, v)?,
            "weights.gamma" => w.gamma = num(0, key, v)?,
            "weights.delta" => w.delta = num(0, key, v)?,
            "weights.eta1" => w.eta1 = num(0, key, v)?,
            "weights.eta2" => w.eta2 = num(0, key, v)?,
            "weights.eta3" => w.eta3 = num(0, key, v)?,
            "perturbation.epsilon" => self.perturbation.epsilon = num(0, key, v)?,
            "perturbation.seed" => self.perturbation.seed = num(0, key, v)?,
            "schedule.steps" => s.steps = num(0, key, v)?,
            "schedule.batch_size" => s.batch_size = num(0, key, v)?,
            "schedule.learning_rate" => s.learning_rate = num(0, key, v)?,
            "schedule.beta1" => s.beta1 = num(0, key, v)?,
            "schedule.beta2" => s.beta2 = num(0, key, v)?,
            "schedule.eval_interval" => s.eval_interval = num(0, key, v)?,
            "schedule.eval_count" => s.eval_count = num(0, key, v)?,
            "seeds.data" => self.seeds.data = num(0, key, v)?,
            "seeds.classifier" => self.seeds.classifier = num(0, key, v)?,
            "seeds.generator" => self.seeds.generator = num(0, key, v)?,
            "seeds.conditions" => self.seeds.conditions = num(0, key, v)?,
            "eval.samples" => self.eval.samples = num(0, key, v)?,
            "eval.grid_columns" => self.eval.grid_columns = num(0, key, v)?,
            "eval.seed" => self.eval.seed = num(0, key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

fn num<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        let at = if line > 0 { format!("line {line}: ") } else { String::new() };
        Error::Config(format!("{at}invalid value `{v}` for `{key}`"))
    })
}

fn num_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(0, key, p.trim())).collect()
}

fn list(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
}

fn shape((c, h, w): (usize, usize, usize)) -> String {
    format!("{c}, {h}, {w}")
}

fn parse_shape(key: &str, v: &str) -> Result<(usize, usize, usize)> {
    match num_list::<usize>(key, v)?.as_slice() {
        &[c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Config(format!("`{key}` needs three comma-separated sizes, got `{v}`"))),
    }
}

fn conv_blocks(v: &str) -> Result<Vec<ConvBlockSpec>> {
    v.split(',')
        .map(|item| {
            let parts = num_list::<usize>("classifier.conv_blocks", &item.trim().replace('/', ","))?;
            match parts.as_slice() {
                &[out_channels, kernel, stride] => Ok(ConvBlockSpec {
                    out_channels,
                    kernel,
                    stride,
                }),
                _ => Err(Error::Config(format!(
                    "conv block `{}` must be channels/kernel/stride",
                    item.trim()
                ))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        for id in DatasetId::ALL {
            for mode in [RunMode::Invert, RunMode::Reconstruct] {
                let cfg = RunConfig::default_for(id, 1000, mode);
                cfg.validate().unwrap();
                assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
            }
        }
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# sweep member\ndataset = mnist\nmode = reconstruct\nweights.gamma = 0.5 # high\n\nclassifier.conv_blocks = 8/5/1, 16/3/2\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, RunMode::Reconstruct);
        assert_eq!(cfg.weights.gamma, 0.5);
        assert_eq!(cfg.classifier.conv_blocks[1], ConvBlockSpec { out_channels: 16, kernel: 3, stride: 2 });
        assert_eq!(cfg.weights.eta3, LossWeights::reconstruction().eta3);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in [
            "mode = invert",
            "dataset = imagenet",
            "dataset = mnist\nweights.zeta = 1",
            "dataset = mnist\nschedule.steps = many",
            "dataset = mnist\nschedule.steps = 1\nschedule.steps = 2",
            "dataset = mnist\njust words",
            "dataset = mnist\nclassifier.input_shape = 1, 28",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn inversion_rejects_reconstruction_weights() {
        let mut cfg = RunConfig::default_for(DatasetId::Mnist, 1000, RunMode::Invert);
        cfg.weights.eta2 = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![0.0f64..1.0, 1e-12f64..1e-3, 1.0f64..1e6]
    }

    proptest! {
        #[test]
        fn config_round_trips(
            id in prop::sample::select(DatasetId::ALL.to_vec()),
            recon in any::<bool>(),
            size in 1usize..100_000,
            seeds in any::<[u64; 5]>(),
            ws in prop::array::uniform9(finite()),
            eps in 0.0f64..0.5,
            lr in finite(),
            steps in 1usize..1_000_000,
            fc in prop::collection::vec(1usize..1024, 0..3),
            checkpoint in prop::option::of("[a-z0-9_/]{1,20}"),
        ) {
            let mode = if recon { RunMode::Reconstruct } else { RunMode::Invert };
            let mut cfg = RunConfig::default_for(id, size, mode);
            let [a, ap, b, bp, g, d, e1, e2, e3] = ws;
            cfg.weights = LossWeights { alpha: a, alpha_p: ap, beta: b, beta_p: bp, gamma: g, delta: d, eta1: e1, eta2: e2, eta3: e3 };
            cfg.perturbation.epsilon = eps;
            cfg.perturbation.seed = seeds[4];
            cfg.schedule.learning_rate = lr;
            cfg.schedule.steps = steps;
            cfg.seeds = RunSeeds { data: seeds[0], classifier: seeds[1], generator: seeds[2], conditions: seeds[3] };
            let mut widths = fc;
            widths.push(cfg.classifier.num_classes);
            cfg.classifier.fc_widths = widths;
            cfg.classifier_checkpoint = checkpoint.map(PathBuf::from);
            prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}
