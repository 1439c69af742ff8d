//! The convolutional classifier under attack.
//!
//! A [`FrozenClassifier`] is always run in evaluation mode. Its parameters
//! never require gradients except inside a [`WeightGradScope`], which is how
//! the weight-gradient probes and the reconstruction gradient penalty reach
//! them. Scopes are serialized by an internal lock.

use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::nn::{self, OptimizerConfig};
use tch::{Device, Kind, Tensor};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture of the classifier. Every conv block is
/// conv -> batch-norm -> leaky-ReLU -> 2x2 max-pool -> dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub conv_blocks: Vec<ConvBlockSpec>,
    /// Fully connected widths; the last one is the class count.
    pub fc_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub num_classes: usize,
    /// `(channels, height, width)` of the input images.
    pub input_shape: (usize, usize, usize),
}

impl ClassifierSpec {
    /// Three conv blocks (32, 64, 128) followed by FC widths `[256, N]`.
    pub fn default_for(input_shape: (usize, usize, usize), num_classes: usize) -> Self {
        let block = |c| ConvBlockSpec {
            out_channels: c,
            kernel: 3,
            stride: 1,
        };
        Self {
            conv_blocks: vec![block(32), block(64), block(128)],
            fc_widths: vec![256, num_classes],
            dropout_rate: 0.3,
            leaky_slope: 0.01,
            num_classes,
            input_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() || self.fc_widths.is_empty() {
            return Err(Error::Config(
                "classifier needs at least one conv block and one FC layer".into(),
            ));
        }
        if self.fc_widths.last() != Some(&self.num_classes) {
            return Err(Error::Config(format!(
                "final FC width {:?} must equal the class count {}",
                self.fc_widths.last(),
                self.num_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        if self.leaky_slope <= 0.0 {
            return Err(Error::Config(format!("leaky slope {} must be positive", self.leaky_slope)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config("empty input shape".into()));
        }
        if self.conv_blocks.iter().any(|b| b.out_channels == 0 || b.kernel == 0 || b.stride == 0)
            || self.fc_widths.contains(&0)
        {
            return Err(Error::Config("zero-sized layer in classifier spec".into()));
        }
        self.flattened_width().map(|_| ())
    }

    /// Width of the flattened conv output feeding the first FC layer.
    fn flattened_width(&self) -> Result<usize> {
        let (_, mut h, mut w) = self.input_shape;
        for b in &self.conv_blocks {
            let pad = b.kernel / 2;
            h = (h + 2 * pad).checked_sub(b.kernel).map(|v| v / b.stride + 1).unwrap_or(0);
            w = (w + 2 * pad).checked_sub(b.kernel).map(|v| v / b.stride + 1).unwrap_or(0);
            if h >= 2 && w >= 2 {
                h /= 2;
                w /= 2;
            }
            if h == 0 || w == 0 {
                return Err(Error::Config("conv stack shrinks the input to nothing".into()));
            }
        }
        Ok(self.conv_blocks.last().unwrap().out_channels * h * w)
    }

    /// Width of the penultimate activations exposed as features.
    pub fn feature_width(&self) -> usize {
        match self.fc_widths.len() {
            1 => self.flattened_width().unwrap_or(0),
            n => self.fc_widths[n - 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a train-accuracy gain above `plateau_tolerance` before stopping.
    pub patience: usize,
    pub plateau_tolerance: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            patience: 3,
            plateau_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainMetrics {
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub epochs: usize,
    pub final_loss: f64,
}

struct ConvBlock {
    conv: nn::Conv2D,
    bn: nn::BatchNorm,
}

struct Network {
    blocks: Vec<ConvBlock>,
    fcs: Vec<nn::Linear>,
    dropout: f64,
    slope: f64,
}

/// Penultimate features and logits from one forward pass.
pub struct Activations {
    pub features: Tensor,
    pub logits: Tensor,
}

impl Network {
    fn new(root: &nn::Path, spec: &ClassifierSpec) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::new();
        let mut c_in = spec.input_shape.0 as i64;
        for (i, b) in spec.conv_blocks.iter().enumerate() {
            let cfg = nn::ConvConfig {
                stride: b.stride as i64,
                padding: (b.kernel / 2) as i64,
                ..Default::default()
            };
            let c_out = b.out_channels as i64;
            blocks.push(ConvBlock {
                conv: nn::conv2d(root / format!("conv{i}"), c_in, c_out, b.kernel as i64, cfg),
                bn: nn::batch_norm2d(root / format!("bn{i}"), c_out, Default::default()),
            });
            c_in = c_out;
        }
        let mut fcs = Vec::new();
        let mut width = spec.flattened_width()? as i64;
        for (i, &out) in spec.fc_widths.iter().enumerate() {
            fcs.push(nn::linear(root / format!("fc{i}"), width, out as i64, Default::default()));
            width = out as i64;
        }
        Ok(Self {
            blocks,
            fcs,
            dropout: spec.dropout_rate,
            slope: spec.leaky_slope,
        })
    }

    fn leaky(&self, x: &Tensor) -> Tensor {
        x.maximum(&(x * self.slope))
    }

    fn forward(&self, x: &Tensor, train: bool) -> Activations {
        let mut h = x.shallow_clone();
        for b in &self.blocks {
            h = self.leaky(&h.apply(&b.conv).apply_t(&b.bn, train));
            let (hh, ww) = (h.size()[2], h.size()[3]);
            if hh >= 2 && ww >= 2 {
                h = h.max_pool2d_default(2);
            }
            h = h.dropout(self.dropout, train);
        }
        let mut h = h.flatten(1, -1);
        let last = self.fcs.len() - 1;
        for fc in &self.fcs[..last] {
            h = self.leaky(&h.apply(fc)).dropout(self.dropout, train);
        }
        let logits = h.apply(&self.fcs[last]);
        Activations {
            features: h,
            logits,
        }
    }
}

/// Trained classifier held in evaluation mode.
pub struct FrozenClassifier {
    vs: nn::VarStore,
    net: Network,
    spec: ClassifierSpec,
    metrics: TrainMetrics,
    probe: Mutex<()>,
}

impl std::fmt::Debug for FrozenClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FrozenClassifier")
            .field("spec", &self.spec)
            .field("metrics", &self.metrics)
            .finish()
    }
}

/// Holds the probe lock with classifier parameters temporarily requiring
/// gradients. Dropping it refreezes the weights and clears their gradients.
pub struct WeightGradScope<'a> {
    clf: &'a FrozenClassifier,
    _guard: MutexGuard<'a, ()>,
}

impl WeightGradScope<'_> {
    pub fn parameters(&self) -> Vec<Tensor> {
        self.clf.vs.trainable_variables()
    }
}

impl Drop for WeightGradScope<'_> {
    fn drop(&mut self) {
        set_requires_grad(&self.clf.vs, false);
        zero_grads(&self.clf.vs);
    }
}

fn zero_grads(vs: &nn::VarStore) {
    for mut p in vs.trainable_variables() {
        p.zero_grad();
    }
}

fn seed_torch(seed: u64) {
    tch::manual_seed(seed as i64);
}

fn build(spec: &ClassifierSpec, seed: u64) -> Result<(nn::VarStore, Network)> {
    seed_torch(seed);
    let vs = nn::VarStore::new(Device::Cpu);
    let net = Network::new(&vs.root(), spec)?;
    Ok((vs, net))
}

/// Mean cross-entropy of `logits` against integer `labels`, computed in the
/// logits' own precision.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Tensor {
    logits.log_softmax(-1, logits.kind()).nll_loss(labels)
}

fn check_labels(labels: &Tensor, batch: i64, n: usize) -> Result<()> {
    if labels.dim() != 1 || labels.size()[0] != batch {
        return Err(Error::Argument(format!(
            "labels of shape {:?} for a batch of {batch}",
            labels.size()
        )));
    }
    if batch > 0 {
        let lo = labels.min().int64_value(&[]);
        let hi = labels.max().int64_value(&[]);
        if lo < 0 || hi >= n as i64 {
            return Err(Error::Argument(format!("labels span [{lo}, {hi}], expected [0, {n})")));
        }
    }
    Ok(())
}

/// Fraction of samples whose argmax matches the label, evaluated in chunks.
fn accuracy(net: &Network, images: &Tensor, labels: &Tensor, kind: Kind) -> f64 {
    let n = images.size()[0];
    if n == 0 {
        return 0.0;
    }
    let mut correct = 0i64;
    tch::no_grad(|| {
        for start in (0..n).step_by(1000) {
            let len = (n - start).min(1000);
            let x = images.narrow(0, start, len).to_kind(kind);
            let y = labels.narrow(0, start, len);
            let pred = net.forward(&x, false).logits.argmax(-1, false);
            correct += pred.eq_tensor(&y).sum(Kind::Int64).int64_value(&[]);
        }
    });
    correct as f64 / n as f64
}

/// Trains a classifier with Adam and returns it frozen.
///
/// Stops after `hyper.max_epochs` or once the running train accuracy has not
/// improved by more than `plateau_tolerance` for `patience` epochs.
pub fn train_classifier(
    spec: &ClassifierSpec,
    train: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<FrozenClassifier> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    if spec.num_classes != train.num_classes() || spec.input_shape != train.shape() {
        return Err(Error::Argument(format!(
            "spec expects {} classes of {:?}, data has {} of {:?}",
            spec.num_classes,
            spec.input_shape,
            train.num_classes(),
            train.shape()
        )));
    }
    if hyper.batch_size == 0 || hyper.max_epochs == 0 {
        return Err(Error::Config("batch size and epoch budget must be positive".into()));
    }
    let (mut vs, net) = build(spec, seed)?;
    let mut opt = nn::Adam::default().build(&vs, hyper.learning_rate)?;
    let (images, labels) = train.to_tensors(Device::Cpu);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<i64> = (0..train.len() as i64).collect();

    let mut best = 0.0f64;
    let mut stale = 0;
    let mut epochs = 0;
    let mut final_loss = f64::NAN;
    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0i64;
        for chunk in order.chunks(hyper.batch_size) {
            let idx = Tensor::from_slice(chunk);
            let x = images.index_select(0, &idx);
            let y = labels.index_select(0, &idx);
            let out = net.forward(&x, true);
            let loss = cross_entropy(&out.logits, &y);
            let l = loss.double_value(&[]);
            if !l.is_finite() {
                return Err(Error::Training {
                    stage: "classifier epoch",
                    index: epoch,
                    reason: format!("non-finite loss {l}"),
                    breakdown: None,
                });
            }
            opt.backward_step(&loss);
            loss_sum += l * chunk.len() as f64;
            correct += out
                .logits
                .argmax(-1, false)
                .eq_tensor(&y)
                .sum(Kind::Int64)
                .int64_value(&[]);
        }
        epochs = epoch + 1;
        final_loss = loss_sum / train.len() as f64;
        let running = correct as f64 / train.len() as f64;
        log::debug!("classifier epoch {epochs}: loss {final_loss:.4} running acc {running:.4}");
        if running > best + hyper.plateau_tolerance {
            best = running;
            stale = 0;
        } else {
            stale += 1;
        }
        if running >= 1.0 || stale >= hyper.patience {
            break;
        }
    }

    vs.freeze();
    let train_accuracy = accuracy(&net, &images, &labels, Kind::Float);
    let test_accuracy = test.map(|t| {
        let (x, y) = t.to_tensors(Device::Cpu);
        accuracy(&net, &x, &y, Kind::Float)
    });
    log::info!(
        "classifier trained: {epochs} epochs, train acc {train_accuracy:.4}, test acc {test_accuracy:?}"
    );
    Ok(FrozenClassifier {
        vs,
        net,
        spec: spec.clone(),
        metrics: TrainMetrics {
            train_accuracy,
            test_accuracy,
            epochs,
            final_loss,
        },
        probe: Mutex::new(()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierManifest {
    pub spec: ClassifierSpec,
    pub dataset: String,
    pub subset_size: usize,
    pub seed: u64,
    pub hyper: TrainHyper,
    pub metrics: TrainMetrics,
    pub checksum: String,
}

pub const WEIGHTS_FILE: &str = "classifier.safetensors";
pub const MANIFEST_FILE: &str = "classifier.json";

impl FrozenClassifier {
    /// Randomly initialized classifier, frozen without training.
    pub fn untrained(spec: &ClassifierSpec, seed: u64) -> Result<Self> {
        let (mut vs, net) = build(spec, seed)?;
        vs.freeze();
        Ok(Self {
            vs,
            net,
            spec: spec.clone(),
            metrics: TrainMetrics::default(),
            probe: Mutex::new(()),
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn metrics(&self) -> &TrainMetrics {
        &self.metrics
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Floating point kind of the weights.
    pub fn kind(&self) -> Kind {
        self.vs
            .trainable_variables()
            .first()
            .map(|t| t.kind())
            .unwrap_or(Kind::Float)
    }

    /// Converts the weights to another floating point kind (e.g. for
    /// finite-difference checks in double precision).
    pub fn set_kind(&mut self, kind: Kind) {
        self.vs.set_kind(kind);
        self.vs.freeze();
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let (c, h, w) = self.spec.input_shape;
        let size = images.size();
        if size.len() != 4 || size[1..] != [c as i64, h as i64, w as i64] {
            return Err(Error::Argument(format!(
                "image batch of shape {size:?} does not match classifier input ({c}, {h}, {w})"
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass; differentiable with respect to `images`.
    pub fn forward(&self, images: &Tensor) -> Result<Activations> {
        self.check_images(images)?;
        Ok(self.net.forward(images, false))
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images)?.logits)
    }

    pub fn predict_proba(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.logits(images)?.softmax(-1, self.kind()))
    }

    /// Activations feeding the final FC layer, one row per image.
    pub fn penultimate_features(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images)?.features)
    }

    /// Unfreezes the weights for gradient computation until the scope drops.
    pub fn weight_grad_scope(&self) -> WeightGradScope<'_> {
        let guard = self.probe.lock().unwrap_or_else(|p| p.into_inner());
        zero_grads(&self.vs);
        set_requires_grad(&self.vs, true);
        WeightGradScope {
            clf: self,
            _guard: guard,
        }
    }

    /// Global L2 norm of the cross-entropy gradient with respect to all
    /// classifier weights. Weights are left untouched.
    pub fn weight_grad_norm(&self, images: &Tensor, labels: &Tensor) -> Result<f64> {
        self.weight_grad_norm_scaled(images, labels, 1.0)
    }

    /// Same as [`Self::weight_grad_norm`] for the loss multiplied by `scale`.
    pub fn weight_grad_norm_scaled(&self, images: &Tensor, labels: &Tensor, scale: f64) -> Result<f64> {
        self.check_images(images)?;
        let batch = images.size()[0];
        if batch == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        check_labels(labels, batch, self.spec.num_classes)?;
        let scope = self.weight_grad_scope();
        let images = images.detach();
        let loss = cross_entropy(&self.net.forward(&images, false).logits, labels) * scale;
        loss.backward();
        let mut sq = 0.0f64;
        for p in scope.parameters() {
            let g = p.grad();
            if g.defined() {
                sq += g.to_kind(Kind::Double).square().sum(Kind::Double).double_value(&[]);
            }
        }
        drop(scope);
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite weight gradient norm {norm}")));
        }
        Ok(norm)
    }

    /// SHA-256 over every variable (weights and batch-norm statistics).
    pub fn checksum(&self) -> String {
        let mut vars: Vec<(String, Tensor)> = self.vs.variables().into_iter().collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        let mut h = Sha256::new();
        for (name, t) in vars {
            h.update(name.as_bytes());
            let flat = t.detach().to_kind(Kind::Double).flatten(0, -1);
            let vals = Vec::<f64>::try_from(&flat).unwrap_or_default();
            for v in vals {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path, dataset: &str, subset_size: usize, seed: u64, hyper: &TrainHyper) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vs.save(dir.join(WEIGHTS_FILE))?;
        let manifest = ClassifierManifest {
            spec: self.spec.clone(),
            dataset: dataset.to_string(),
            subset_size,
            seed,
            hyper: hyper.clone(),
            metrics: self.metrics.clone(),
            checksum: self.checksum(),
        };
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ClassifierManifest)> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ClassifierManifest = serde_json::from_str(&text)?;
        let (mut vs, net) = build(&manifest.spec, 0)?;
        vs.load(dir.join(WEIGHTS_FILE))?;
        vs.freeze();
        let clf = Self {
            vs,
            net,
            spec: manifest.spec.clone(),
            metrics: manifest.metrics.clone(),
            probe: Mutex::new(()),
        };
        if clf.checksum() != manifest.checksum {
            return Err(Error::Config(format!(
                "classifier weights in {} do not match the manifest checksum",
                dir.display()
            )));
        }
        Ok((clf, manifest))
    }
}

fn set_requires_grad(vs: &nn::VarStore, on: bool) {
    for p in vs.trainable_variables() {
        let _ = p.set_requires_grad(on);
    }
}
