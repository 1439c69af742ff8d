//! Quality metrics for generated images and the classifier-property
//! premises: confidence, input-gradient and weight-gradient gaps between
//! in-distribution and out-of-distribution inputs.
//!
//! The nearest-neighbour distance is a quantitative proxy for visual
//! inspection; it implies no threshold for resembling the training set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Device, Kind, Tensor};

use crate::classifier::FrozenClassifier;
use crate::conditioning::{Condition, ConditionBatch, ConditionSampler};
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::generator::{sample_latents, Generator};
use crate::inversion::cosine_diversity_loss;

const CHUNK: usize = 256;
const GRAD_BATCH: usize = 64;
const LATENT_SEED_OFFSET: u64 = 0x1A7E_5EED;

/// Images generated in evaluation mode with the conditions that produced them.
pub struct GeneratedBatch {
    pub images: Tensor,
    pub labels: Vec<i64>,
}

fn generate_for(gen: &Generator, conds: &[Condition], seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ LATENT_SEED_OFFSET);
    let dim = gen.spec().latent_dim;
    let mut parts = Vec::new();
    tch::no_grad(|| -> Result<()> {
        for chunk in conds.chunks(CHUNK) {
            let z = sample_latents(chunk.len(), dim, &mut rng);
            let batch = ConditionBatch::new(chunk)?;
            parts.push(gen.generate(&z, &batch, false)?);
        }
        Ok(())
    })?;
    Ok(Tensor::cat(&parts, 0))
}

/// `count` fresh generations from a seeded condition stream.
pub fn generate_samples(gen: &Generator, count: usize, seed: u64, hot: bool) -> Result<GeneratedBatch> {
    let spec = gen.spec();
    let conds = ConditionSampler::new(spec.num_classes, seed, hot)?
        .with_mode(spec.mode)
        .sample(count)?;
    let images = generate_for(gen, &conds, seed)?;
    Ok(GeneratedBatch {
        images,
        labels: conds.iter().map(|c| c.label as i64).collect(),
    })
}

/// `count` generations spread evenly over the classes (the first
/// `count % N` classes get one extra), ordered by label. Soft conditions are
/// drawn from the seeded stream and kept until each class quota is met.
pub fn generate_balanced(gen: &Generator, count: usize, seed: u64, hot: bool) -> Result<GeneratedBatch> {
    let spec = gen.spec();
    let n = spec.num_classes;
    if count < n {
        return Err(Error::Argument(format!("{count} samples cannot cover {n} classes")));
    }
    let quota: Vec<usize> = (0..n).map(|c| count / n + usize::from(c < count % n)).collect();
    let mut sampler = ConditionSampler::new(n, seed, hot)?.with_mode(spec.mode);
    let mut buckets: Vec<Vec<Condition>> = vec![Vec::new(); n];
    let mut open = n;
    while open > 0 {
        for c in sampler.sample(count)? {
            let label = c.label;
            if buckets[label].len() < quota[label] {
                buckets[label].push(c);
                if buckets[label].len() == quota[label] {
                    open -= 1;
                }
            }
        }
    }
    let conds: Vec<Condition> = buckets.into_iter().flatten().collect();
    let images = generate_for(gen, &conds, seed)?;
    Ok(GeneratedBatch {
        images,
        labels: conds.iter().map(|c| c.label as i64).collect(),
    })
}

fn predictions(clf: &FrozenClassifier, images: &Tensor) -> Result<Tensor> {
    let n = images.size()[0];
    let mut parts = Vec::new();
    tch::no_grad(|| -> Result<()> {
        for start in (0..n).step_by(CHUNK) {
            let len = (n - start).min(CHUNK as i64);
            parts.push(clf.predict_proba(&images.narrow(0, start, len))?);
        }
        Ok(())
    })?;
    Ok(Tensor::cat(&parts, 0))
}

fn agreement(probs: &Tensor, labels: &[i64]) -> f64 {
    let pred = Vec::<i64>::try_from(probs.argmax(-1, false)).unwrap_or_default();
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Fraction of `count` fresh generations whose classifier argmax equals the
/// conditioned label. `hot` selects one-hot conditions.
pub fn label_agreement(clf: &FrozenClassifier, gen: &Generator, count: usize, seed: u64, hot: bool) -> Result<f64> {
    let batch = generate_samples(gen, count, seed, hot)?;
    Ok(agreement(&predictions(clf, &batch.images)?, &batch.labels))
}

fn flatten_f64(images: &Tensor) -> Tensor {
    images.flatten(1, -1).to_kind(Kind::Double).to_device(Device::Cpu)
}

/// Per-sample minimum L2 distance from each generated image to the training
/// images, restricted to the image's label when `same_class_only` is set.
pub fn nn_distance(
    generated: &Tensor,
    labels: &[i64],
    train: &LabeledImageSet,
    same_class_only: bool,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Argument("nearest-neighbour search over an empty training set".into()));
    }
    let (c, h, w) = train.shape();
    let size = generated.size();
    if size.len() != 4 || size[1..] != [c as i64, h as i64, w as i64] {
        return Err(Error::Argument(format!(
            "generated batch {size:?} does not match training images ({c}, {h}, {w})"
        )));
    }
    let count = size[0] as usize;
    if same_class_only && labels.len() != count {
        return Err(Error::Argument(format!("{} labels for {count} generated images", labels.len())));
    }

    let gen = flatten_f64(generated);
    let (train_x, _) = train.to_tensors(Device::Cpu);
    let train_x = flatten_f64(&train_x);
    let train_sq = train_x.square().sum_dim_intlist(1, false, Kind::Double);

    let groups: Vec<(Vec<usize>, Vec<i64>)> = if same_class_only {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.num_classes()];
        for (i, &l) in labels.iter().enumerate() {
            let slot = by_class
                .get_mut(l as usize)
                .ok_or_else(|| Error::Argument(format!("label {l} outside the training classes")))?;
            slot.push(i);
        }
        let mut missing = Vec::new();
        let mut groups = Vec::new();
        for (class, rows) in by_class.into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let cols: Vec<i64> = (0..train.len())
                .filter(|&j| train.labels()[j] == class as i64)
                .map(|j| j as i64)
                .collect();
            if cols.is_empty() {
                missing.push(class);
            }
            groups.push((rows, cols));
        }
        if !missing.is_empty() {
            return Err(Error::Argument(format!("training set has no images of classes {missing:?}")));
        }
        groups
    } else {
        vec![((0..count).collect(), (0..train.len() as i64).collect())]
    };

    let mut out = vec![0.0; count];
    tch::no_grad(|| {
        for (rows, cols) in groups {
            let cols_t = Tensor::from_slice(&cols);
            let cand = train_x.index_select(0, &cols_t);
            let cand_sq = train_sq.index_select(0, &cols_t);
            for chunk in rows.chunks(CHUNK) {
                let idx: Vec<i64> = chunk.iter().map(|&i| i as i64).collect();
                let g = gen.index_select(0, &Tensor::from_slice(&idx));
                let g_sq = g.square().sum_dim_intlist(1, true, Kind::Double);
                let d2 = g_sq + cand_sq.unsqueeze(0) - g.matmul(&cand.tr()) * 2.0;
                let best = d2.argmin(1, false);
                let nearest = cand.index_select(0, &best);
                let exact = (&g - nearest).square().sum_dim_intlist(1, false, Kind::Double).sqrt();
                let exact = Vec::<f64>::try_from(exact).expect("double tensor");
                for (&i, d) in chunk.iter().zip(exact) {
                    out[i] = d;
                }
            }
        }
    });
    Ok(out)
}

/// Mean, median and minimum of a set of distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("summary of an empty sample".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
        };
        Ok(Self {
            mean: sorted.iter().sum::<f64>() / m as f64,
            median,
            min: sorted[0],
        })
    }
}

/// Scalar output whose input gradient is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputProbe {
    /// Softmax probability of the predicted class.
    TopProbability,
    /// Largest logit.
    TopLogit,
}

/// Per-sample L2 norm of the input gradient of `probe`.
pub fn input_grad_norms(clf: &FrozenClassifier, images: &Tensor, probe: InputProbe) -> Result<Vec<f64>> {
    let n = images.size()[0];
    let mut out = Vec::with_capacity(n as usize);
    for start in (0..n).step_by(GRAD_BATCH) {
        let len = (n - start).min(GRAD_BATCH as i64);
        let x = images.narrow(0, start, len).detach().set_requires_grad(true);
        let logits = clf.logits(&x)?;
        let scores = match probe {
            InputProbe::TopProbability => logits.softmax(-1, logits.kind()),
            InputProbe::TopLogit => logits,
        };
        let top = scores.max_dim(1, false).0.sum(scores.kind());
        let g = Tensor::f_run_backward(&[&top], &[&x], false, false)?;
        let norms = g[0]
            .flatten(1, -1)
            .to_kind(Kind::Double)
            .square()
            .sum_dim_intlist(1, false, Kind::Double)
            .sqrt();
        out.extend(Vec::<f64>::try_from(norms).expect("double tensor"));
    }
    Ok(out)
}

/// Weight-gradient norms of consecutive batches of at most 64 samples.
pub fn batch_weight_grad_norms(clf: &FrozenClassifier, images: &Tensor, labels: &Tensor) -> Result<Vec<f64>> {
    let n = images.size()[0];
    let mut out = Vec::new();
    for start in (0..n).step_by(GRAD_BATCH) {
        let len = (n - start).min(GRAD_BATCH as i64);
        out.push(clf.weight_grad_norm(&images.narrow(0, start, len), &labels.narrow(0, start, len))?);
    }
    Ok(out)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn ratio(num: f64, den: f64) -> Result<f64> {
    if den <= 0.0 || !den.is_finite() || !num.is_finite() {
        return Err(Error::Numeric(format!("degenerate premise ratio {num} / {den}")));
    }
    Ok(num / den)
}

fn mean_max_prob(clf: &FrozenClassifier, images: &Tensor) -> Result<f64> {
    let probs = predictions(clf, images)?;
    Ok(probs.max_dim(1, false).0.to_kind(Kind::Double).mean(Kind::Double).double_value(&[]))
}

/// Batch-mean premise statistics on training images versus uniform noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PremiseReport {
    /// Mean train max-softmax over mean noise max-softmax.
    pub confidence_gap: f64,
    /// Mean noise input-gradient norm over the train mean, top probability.
    pub input_grad_gap: f64,
    /// The same ratio for the top logit.
    pub input_logit_grad_gap: f64,
    /// Mean noise weight-gradient norm over the train mean.
    pub weight_grad_gap: f64,
    pub train_confidence: f64,
    pub noise_confidence: f64,
    pub train_input_grad: f64,
    pub noise_input_grad: f64,
    pub train_weight_grad: f64,
    pub noise_weight_grad: f64,
}

/// Uniform `[0, 1]` noise images with uniformly random labels.
pub fn uniform_noise(shape: (usize, usize, usize), num_classes: usize, count: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = shape;
    let pixels: Vec<f32> = (0..count * c * h * w).map(|_| rng.random::<f32>()).collect();
    let labels: Vec<i64> = (0..count).map(|_| rng.random_range(0..num_classes as i64)).collect();
    (
        Tensor::from_slice(&pixels).view([count as i64, c as i64, h as i64, w as i64]),
        Tensor::from_slice(&labels),
    )
}

/// Compares the classifier on its training set against `noise_count` uniform
/// noise images.
pub fn premise_report(
    clf: &FrozenClassifier,
    train: &LabeledImageSet,
    noise_count: usize,
    seed: u64,
) -> Result<PremiseReport> {
    if train.is_empty() || noise_count == 0 {
        return Err(Error::Argument("premise report needs training images and noise samples".into()));
    }
    let (train_x, train_y) = train.to_tensors(Device::Cpu);
    let (noise_x, noise_y) = uniform_noise(train.shape(), clf.num_classes(), noise_count, seed);

    let train_confidence = mean_max_prob(clf, &train_x)?;
    let noise_confidence = mean_max_prob(clf, &noise_x)?;
    let train_input_grad = mean(&input_grad_norms(clf, &train_x, InputProbe::TopProbability)?);
    let noise_input_grad = mean(&input_grad_norms(clf, &noise_x, InputProbe::TopProbability)?);
    let input_logit_grad_gap = ratio(
        mean(&input_grad_norms(clf, &noise_x, InputProbe::TopLogit)?),
        mean(&input_grad_norms(clf, &train_x, InputProbe::TopLogit)?),
    )?;
    let train_weight_grad = mean(&batch_weight_grad_norms(clf, &train_x, &train_y)?);
    let noise_weight_grad = mean(&batch_weight_grad_norms(clf, &noise_x, &noise_y)?);

    Ok(PremiseReport {
        confidence_gap: ratio(train_confidence, noise_confidence)?,
        input_grad_gap: ratio(noise_input_grad, train_input_grad)?,
        input_logit_grad_gap,
        weight_grad_gap: ratio(noise_weight_grad, train_weight_grad)?,
        train_confidence,
        noise_confidence,
        train_input_grad,
        noise_input_grad,
        train_weight_grad,
        noise_weight_grad,
    })
}

/// Summary of a generator against its classifier and training subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label_agreement: f64,
    /// Mean max-softmax probability over the generated batch.
    pub mean_confidence: f64,
    /// Same-class nearest-neighbour L2 distance to the training subset.
    pub nn_l2: Summary,
    /// Mean pairwise cosine similarity of penultimate features.
    pub diversity: f64,
    /// Mean generated weight-gradient norm over the train mean.
    pub grad_gap: f64,
    /// Mean generated top-probability input-gradient norm over the train mean.
    pub input_grad_gap: f64,
    pub samples: usize,
}

pub fn mean_feature_cosine(clf: &FrozenClassifier, images: &Tensor) -> Result<f64> {
    let features = tch::no_grad(|| clf.penultimate_features(images))?;
    Ok(cosine_diversity_loss(&features.to_kind(Kind::Double))?.double_value(&[]))
}

/// Evaluates `count` class-balanced generations.
pub fn evaluate(
    clf: &FrozenClassifier,
    gen: &Generator,
    train: &LabeledImageSet,
    count: usize,
    seed: u64,
    hot: bool,
) -> Result<EvalReport> {
    let batch = generate_balanced(gen, count, seed, hot)?;
    evaluate_batch(clf, &batch, train)
}

pub fn evaluate_batch(clf: &FrozenClassifier, batch: &GeneratedBatch, train: &LabeledImageSet) -> Result<EvalReport> {
    let probs = predictions(clf, &batch.images)?;
    let label_agreement = agreement(&probs, &batch.labels);
    let mean_confidence = probs.max_dim(1, false).0.to_kind(Kind::Double).mean(Kind::Double).double_value(&[]);
    let nn = nn_distance(&batch.images, &batch.labels, train, true)?;

    let (train_x, train_y) = train.to_tensors(Device::Cpu);
    let gen_y = Tensor::from_slice(&batch.labels);
    let grad_gap = ratio(
        mean(&batch_weight_grad_norms(clf, &batch.images, &gen_y)?),
        mean(&batch_weight_grad_norms(clf, &train_x, &train_y)?),
    )?;
    let input_grad_gap = ratio(
        mean(&input_grad_norms(clf, &batch.images, InputProbe::TopProbability)?),
        mean(&input_grad_norms(clf, &train_x, InputProbe::TopProbability)?),
    )?;
    Ok(EvalReport {
        label_agreement,
        mean_confidence,
        nn_l2: Summary::of(&nn)?,
        diversity: mean_feature_cosine(clf, &batch.images)?,
        grad_gap,
        input_grad_gap,
        samples: batch.labels.len(),
    })
}
