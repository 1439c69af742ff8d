//! Inversion losses and the generator training loop.
//!
//! The generator is trained against a frozen classifier with
//!
//! ```text
//! L_inv = alpha * KL(P || Q) + beta * CE + gamma * cosine + delta * ortho
//! ```
//!
//! where `P` is the conditioning distribution, `Q` the classifier softmax on
//! the generated images, and the diversity terms act on the classifier's
//! penultimate features of the batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{self, OptimizerConfig};
use tch::{Kind, Tensor};

use crate::classifier::FrozenClassifier;
use crate::conditioning::{Condition, ConditionBatch, ConditionSampler};
use crate::error::{Error, Result};
use crate::generator::{sample_latents, Generator, GeneratorSpec};

/// Floor applied to predicted probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;
/// Guard on feature norms before normalization.
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub alpha_p: f64,
    pub beta: f64,
    pub beta_p: f64,
    pub gamma: f64,
    pub delta: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::inversion()
    }
}

impl LossWeights {
    pub fn inversion() -> Self {
        Self {
            alpha: 1.0,
            alpha_p: 0.0,
            beta: 1.0,
            beta_p: 0.0,
            gamma: 0.1,
            delta: 0.1,
            eta1: 0.0,
            eta2: 0.0,
            eta3: 0.0,
        }
    }

    /// Inversion weights plus the perturbed, image-prior and gradient terms.
    pub fn reconstruction() -> Self {
        Self {
            alpha_p: 1.0,
            beta_p: 1.0,
            eta1: 1e-2,
            eta2: 1.0,
            eta3: 1e-3,
            ..Self::inversion()
        }
    }

    pub fn as_array(&self) -> [f64; 9] {
        [
            self.alpha,
            self.alpha_p,
            self.beta,
            self.beta_p,
            self.gamma,
            self.delta,
            self.eta1,
            self.eta2,
            self.eta3,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// Inversion uses only the four base terms.
    pub fn validate_inversion(&self) -> Result<()> {
        self.validate()?;
        if self.alpha_p != 0.0 || self.beta_p != 0.0 || self.eta1 != 0.0 || self.eta2 != 0.0 || self.eta3 != 0.0 {
            return Err(Error::Config(
                "inversion requires alpha_p = beta_p = eta1 = eta2 = eta3 = 0".into(),
            ));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub ce: f64,
    pub cosine: f64,
    pub ortho: f64,
    pub kl_pert: f64,
    pub ce_pert: f64,
    pub var: f64,
    pub pix: f64,
    pub grad: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Terms in the same order as [`LossWeights::as_array`].
    pub fn terms(&self) -> [f64; 9] {
        [
            self.kl,
            self.kl_pert,
            self.ce,
            self.ce_pert,
            self.cosine,
            self.ortho,
            self.var,
            self.pix,
            self.grad,
        ]
    }

    /// Weighted sum of the terms, recomputed in f64.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.as_array().iter().zip(self.terms()).map(|(w, t)| w * t).sum()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.size() != b.size() || a.dim() != 2 {
        return Err(Error::Argument(format!(
            "{what}: shapes {:?} and {:?} differ or are not (B, N)",
            a.size(),
            b.size()
        )));
    }
    Ok(())
}

/// Batch mean of `sum_i P(i) log(P(i) / Q(i))` with `Q` floored at 1e-8.
/// Zero entries of `P` contribute nothing.
pub fn kl_loss(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    same_shape(p, q, "kl_loss")?;
    let q = q.to_kind(p.kind());
    let log_p = p.clamp_min(1e-30).log();
    let log_q = q.clamp_min(PROB_FLOOR).log();
    Ok((p * (log_p - log_q)).sum_dim_intlist(1, false, p.kind()).mean(p.kind()))
}

/// Batch mean negative log-probability of each label, floored at 1e-8.
pub fn ce_loss(labels: &Tensor, probs: &Tensor) -> Result<Tensor> {
    if probs.dim() != 2 || labels.dim() != 1 || labels.size()[0] != probs.size()[0] {
        return Err(Error::Argument(format!(
            "ce_loss: labels {:?} do not match probabilities {:?}",
            labels.size(),
            probs.size()
        )));
    }
    let n = probs.size()[1];
    if labels.size()[0] > 0 {
        let (lo, hi) = (labels.min().int64_value(&[]), labels.max().int64_value(&[]));
        if lo < 0 || hi >= n {
            return Err(Error::Argument(format!("ce_loss: labels span [{lo}, {hi}], expected [0, {n})")));
        }
    }
    let picked = probs.gather(1, &labels.to_kind(Kind::Int64).unsqueeze(1), false);
    Ok(-picked.clamp_min(PROB_FLOOR).log().mean(probs.kind()))
}

fn normalize_rows(features: &Tensor) -> Tensor {
    let norms = features
        .norm_scalaropt_dim(2, [1].as_slice(), true)
        .clamp_min(NORM_FLOOR);
    features / norms
}

/// Gram matrix of the row-normalized features.
fn normalized_gram(features: &Tensor) -> Tensor {
    let unit = normalize_rows(features);
    unit.matmul(&unit.transpose(0, 1))
}

/// Mean cosine similarity over ordered pairs `i != j` of feature rows.
pub fn cosine_diversity_loss(features: &Tensor) -> Result<Tensor> {
    if features.dim() != 2 || features.size()[0] < 2 {
        return Err(Error::Argument(format!(
            "cosine_diversity_loss needs a (B >= 2, D) batch, got {:?}",
            features.size()
        )));
    }
    let b = features.size()[0] as f64;
    let g = normalized_gram(features);
    let off_diag = g.sum(g.kind()) - g.diagonal(0, 0, 1).sum(g.kind());
    Ok(off_diag / (b * (b - 1.0)))
}

/// Mean squared deviation of the normalized feature Gram matrix from identity.
pub fn orthogonality_loss(features: &Tensor) -> Result<Tensor> {
    if features.dim() != 2 || features.size()[0] < 1 {
        return Err(Error::Argument(format!(
            "orthogonality_loss needs a (B >= 1, D) batch, got {:?}",
            features.size()
        )));
    }
    let min_norm = features
        .detach()
        .to_kind(Kind::Double)
        .norm_scalaropt_dim(2, [1].as_slice(), false)
        .min()
        .double_value(&[]);
    if min_norm < NORM_FLOOR {
        return Err(Error::Numeric("orthogonality_loss: all-zero feature row".into()));
    }
    let b = features.size()[0];
    let g = normalized_gram(features);
    let eye = Tensor::eye(b, (g.kind(), g.device()));
    Ok((g - eye).square().mean(features.kind()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Label agreement is measured every `eval_interval` steps (and at the end).
    pub eval_interval: usize,
    pub eval_count: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eval_interval: 500,
            eval_count: 1024,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size < 2 || self.eval_interval == 0 || self.eval_count == 0 {
            return Err(Error::Config(format!(
                "schedule needs steps > 0, batch_size >= 2, eval_interval > 0, eval_count > 0: {self:?}"
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Seeds for the stochastic parts of generator training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSeeds {
    /// Weight init, dropout and latent draws.
    pub generator: u64,
    /// Condition stream (and perturbation draws in reconstruction).
    pub conditions: u64,
}

impl TrainSeeds {
    pub fn new(seed: u64) -> Self {
        Self {
            generator: seed,
            conditions: seed.wrapping_add(1),
        }
    }
}

/// Generator weights and their optimizer.
pub struct GeneratorTrainer {
    pub generator: Generator,
    opt: nn::Optimizer,
}

impl GeneratorTrainer {
    pub fn new(generator: Generator, schedule: &Schedule) -> Result<Self> {
        let opt = nn::Adam {
            beta1: schedule.beta1,
            beta2: schedule.beta2,
            wd: 0.0,
            eps: 1e-8,
            amsgrad: false,
        }
        .build(generator.var_store(), schedule.learning_rate)?;
        Ok(Self { generator, opt })
    }

    pub(crate) fn apply(&mut self, total: &Tensor) {
        self.opt.zero_grad();
        total.backward();
        self.opt.step();
    }

    pub fn into_generator(self) -> Generator {
        self.generator
    }
}

/// Differentiable inversion terms for a batch of generated images.
pub(crate) struct BaseTerms {
    pub kl: Tensor,
    pub ce: Tensor,
    pub cosine: Tensor,
    pub ortho: Tensor,
}

pub(crate) fn base_terms(clf: &FrozenClassifier, images: &Tensor, conds: &ConditionBatch) -> Result<BaseTerms> {
    let act = clf.forward(images)?;
    let q = act.logits.softmax(-1, act.logits.kind());
    Ok(BaseTerms {
        kl: kl_loss(&conds.dist.to_kind(q.kind()), &q)?,
        ce: ce_loss(&conds.labels, &q)?,
        cosine: cosine_diversity_loss(&act.features)?,
        ortho: orthogonality_loss(&act.features)?,
    })
}

/// Weighted f64 sum of `(weight, term)` pairs, skipping nothing so the
/// recomposition in [`LossBreakdown::recompose`] matches bit for bit.
pub(crate) fn weighted_total(pairs: &[(f64, &Tensor)]) -> Tensor {
    let mut total = Tensor::zeros([], (Kind::Double, tch::Device::Cpu));
    for (w, t) in pairs {
        total = total + t.to_kind(Kind::Double) * *w;
    }
    total
}

pub(crate) fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

/// One generator update on the inversion objective.
pub fn inversion_step(
    clf: &FrozenClassifier,
    trainer: &mut GeneratorTrainer,
    latents: &Tensor,
    conds: &[Condition],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate_inversion()?;
    let batch = ConditionBatch::new(conds)?;
    let images = trainer.generator.generate(latents, &batch, true)?;
    let t = base_terms(clf, &images, &batch)?;
    let total = weighted_total(&[
        (w.alpha, &t.kl),
        (w.beta, &t.ce),
        (w.gamma, &t.cosine),
        (w.delta, &t.ortho),
    ]);
    let breakdown = LossBreakdown {
        kl: scalar(&t.kl),
        ce: scalar(&t.ce),
        cosine: scalar(&t.cosine),
        ortho: scalar(&t.ortho),
        total: scalar(&total),
        ..Default::default()
    };
    check_finite(&breakdown, "inversion step", 0)?;
    trainer.apply(&total);
    Ok(breakdown)
}

pub(crate) fn check_finite(b: &LossBreakdown, stage: &'static str, index: usize) -> Result<()> {
    if b.total.is_finite() && b.terms().iter().all(|t| t.is_finite()) {
        return Ok(());
    }
    Err(Error::Training {
        stage,
        index,
        reason: format!("non-finite loss (total {})", b.total),
        breakdown: Some(Box::new(*b)),
    })
}

/// One line of the JSON-lines metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub losses: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label_agreement: Option<f64>,
}

pub struct TrainOutput {
    pub generator: Generator,
    pub log: Vec<MetricRecord>,
    /// Label agreement measured after the last step.
    pub final_agreement: f64,
}

/// Streams latents and conditions for one training run.
pub(crate) struct BatchStream {
    latent_rng: ChaCha8Rng,
    conditions: ConditionSampler,
    latent_dim: usize,
    batch_size: usize,
}

impl BatchStream {
    pub fn new(spec: &GeneratorSpec, seeds: TrainSeeds, batch_size: usize, hot: bool) -> Result<Self> {
        Ok(Self {
            latent_rng: ChaCha8Rng::seed_from_u64(seeds.generator ^ 0x5EED_1A7E),
            conditions: ConditionSampler::new(spec.num_classes, seeds.conditions, hot)?.with_mode(spec.mode),
            latent_dim: spec.latent_dim,
            batch_size,
        })
    }

    pub fn next_batch(&mut self) -> Result<(Tensor, Vec<Condition>)> {
        let conds = self.conditions.sample(self.batch_size)?;
        let z = sample_latents(self.batch_size, self.latent_dim, &mut self.latent_rng);
        Ok((z, conds))
    }
}

/// Seed used for the evaluation conditions logged during training, so
/// agreement values are comparable across steps.
pub const EVAL_SEED_OFFSET: u64 = 0xE7A1;

/// Trains a fresh generator on the inversion objective.
pub fn train_inversion(
    clf: &FrozenClassifier,
    gen_spec: &GeneratorSpec,
    w: &LossWeights,
    schedule: &Schedule,
    seeds: TrainSeeds,
) -> Result<TrainOutput> {
    w.validate_inversion()?;
    schedule.validate()?;
    check_compatible(clf, gen_spec)?;
    let generator = Generator::new(gen_spec, seeds.generator)?;
    let mut trainer = GeneratorTrainer::new(generator, schedule)?;
    let mut stream = BatchStream::new(gen_spec, seeds, schedule.batch_size, false)?;
    let mut log = Vec::with_capacity(schedule.steps);
    let mut final_agreement = 0.0;
    for step in 1..=schedule.steps {
        let (z, conds) = stream.next_batch()?;
        let losses = inversion_step(clf, &mut trainer, &z, &conds, w).map_err(|e| at_step(e, step))?;
        let label_agreement = if step % schedule.eval_interval == 0 || step == schedule.steps {
            let a = crate::evaluation::label_agreement(
                clf,
                &trainer.generator,
                schedule.eval_count,
                seeds.conditions ^ EVAL_SEED_OFFSET,
                false,
            )?;
            log::info!("inversion step {step}: total {:.4} ce {:.4} agreement {a:.3}", losses.total, losses.ce);
            final_agreement = a;
            Some(a)
        } else {
            None
        };
        log.push(MetricRecord {
            step,
            losses,
            label_agreement,
        });
    }
    Ok(TrainOutput {
        generator: trainer.into_generator(),
        log,
        final_agreement,
    })
}

pub(crate) fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Training {
            stage,
            reason,
            breakdown,
            ..
        } => Error::Training {
            stage,
            index: step,
            reason,
            breakdown,
        },
        other => other,
    }
}

pub(crate) fn check_compatible(clf: &FrozenClassifier, spec: &GeneratorSpec) -> Result<()> {
    spec.validate()?;
    if spec.out_shape != clf.spec().input_shape || spec.num_classes != clf.num_classes() {
        return Err(Error::Config(format!(
            "generator output {:?} over {} classes does not match classifier input {:?} over {}",
            spec.out_shape,
            spec.num_classes,
            clf.spec().input_shape,
            clf.num_classes()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let n = rows[0].len() as i64;
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_slice(&flat).view([rows.len() as i64, n])
    }

    fn v(t: &Tensor) -> f64 {
        t.double_value(&[])
    }

    #[test]
    fn kl_examples() {
        let p = t2(&[&[0.5, 0.5]]);
        assert!(v(&kl_loss(&p, &p).unwrap()).abs() < 1e-12);
        let kl = v(&kl_loss(&t2(&[&[1.0, 0.0]]), &t2(&[&[0.5, 0.5]])).unwrap());
        assert!((kl - 2f64.ln()).abs() < 1e-12);
        let kl = v(&kl_loss(&t2(&[&[0.9, 0.1]]), &t2(&[&[0.6, 0.4]])).unwrap());
        assert!((kl - (0.9 * 1.5f64.ln() + 0.1 * 0.25f64.ln())).abs() < 1e-12);
        assert!(kl_loss(&t2(&[&[1.0, 0.0]]), &t2(&[&[1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn ce_examples() {
        let labels = Tensor::from_slice(&[0i64]);
        assert!(v(&ce_loss(&labels, &t2(&[&[1.0, 0.0]])).unwrap()).abs() < 1e-12);
        assert!((v(&ce_loss(&labels, &t2(&[&[0.5, 0.5]])).unwrap()) - 2f64.ln()).abs() < 1e-12);
        let uniform = Tensor::full([1, 10], 0.1, (Kind::Double, tch::Device::Cpu));
        assert!((v(&ce_loss(&labels, &uniform).unwrap()) - 10f64.ln()).abs() < 1e-12);
        assert!(ce_loss(&Tensor::from_slice(&[2i64]), &t2(&[&[0.5, 0.5]])).is_err());
    }

    #[test]
    fn floor_bounds_ce() {
        let labels = Tensor::from_slice(&[1i64]);
        let ce = v(&ce_loss(&labels, &t2(&[&[1.0, 0.0]])).unwrap());
        assert!((ce - (-(PROB_FLOOR.ln()))).abs() < 1e-9);
    }

    #[test]
    fn cosine_examples() {
        let same = t2(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert!((v(&cosine_diversity_loss(&same).unwrap()) - 1.0).abs() < 1e-12);
        let eye = Tensor::eye(4, (Kind::Double, tch::Device::Cpu));
        assert!(v(&cosine_diversity_loss(&eye).unwrap()).abs() < 1e-12);
        let s = 0.5f64.sqrt();
        let pair = t2(&[&[1.0, 0.0], &[s, s]]);
        assert!((v(&cosine_diversity_loss(&pair).unwrap()) - s).abs() < 1e-12);
        assert!(cosine_diversity_loss(&t2(&[&[1.0, 0.0]])).is_err());
    }

    #[test]
    fn ortho_examples() {
        let eye = Tensor::eye(3, (Kind::Double, tch::Device::Cpu));
        assert!(v(&orthogonality_loss(&eye).unwrap()).abs() < 1e-12);
        let two = t2(&[&[0.6, 0.8], &[0.6, 0.8]]);
        assert!((v(&orthogonality_loss(&two).unwrap()) - 0.5).abs() < 1e-12);
        for b in 1..6usize {
            let rows = Tensor::ones([b as i64, 3], (Kind::Double, tch::Device::Cpu));
            let expected = (b * b - b) as f64 / (b * b) as f64;
            assert!((v(&orthogonality_loss(&rows).unwrap()) - expected).abs() < 1e-12);
        }
        let zero = t2(&[&[0.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(orthogonality_loss(&zero), Err(Error::Numeric(_))));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::inversion().validate_inversion().is_ok());
        assert!(LossWeights::reconstruction().validate_inversion().is_err());
        let bad = LossWeights {
            gamma: -1.0,
            ..LossWeights::inversion()
        };
        assert!(bad.validate().is_err());
    }

    fn dist_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_on_diagonal(p in dist_strategy(5), q in dist_strategy(5)) {
            let pt = Tensor::from_slice(&p).view([1, 5]);
            let qt = Tensor::from_slice(&q).view([1, 5]);
            prop_assert!(v(&kl_loss(&pt, &qt).unwrap()) >= -1e-6);
            prop_assert!(v(&kl_loss(&pt, &pt).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ce_decreases_with_true_label_probability(a in 0.01f64..0.49, b in 0.5f64..0.98) {
            // Label 0 gets a then b; the remaining mass is split evenly.
            let row = |p: f64| Tensor::from_slice(&[p, (1.0 - p) / 2.0, (1.0 - p) / 2.0]).view([1, 3]);
            let labels = Tensor::from_slice(&[0i64]);
            let lo = v(&ce_loss(&labels, &row(a)).unwrap());
            let hi = v(&ce_loss(&labels, &row(b)).unwrap());
            prop_assert!(lo >= 0.0 && hi >= 0.0);
            prop_assert!(hi < lo);
        }

        #[test]
        fn cosine_ignores_positive_row_scaling(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 3),
            scale in 0.1f64..10.0,
            which in 0usize..3,
        ) {
            prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
            let flat: Vec<f64> = rows.concat();
            let f = Tensor::from_slice(&flat).view([3, 4]);
            let mut scaled = flat.clone();
            for x in &mut scaled[which * 4..which * 4 + 4] { *x *= scale; }
            let g = Tensor::from_slice(&scaled).view([3, 4]);
            let a = v(&cosine_diversity_loss(&f).unwrap());
            let b = v(&cosine_diversity_loss(&g).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn ortho_ignores_row_order(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 4),
        ) {
            prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
            let f = Tensor::from_slice(&rows.concat()).view([4, 4]);
            let mut rev = rows.clone();
            rev.reverse();
            let g = Tensor::from_slice(&rev.concat()).view([4, 4]);
            let a = v(&orthogonality_loss(&f).unwrap());
            let b = v(&orthogonality_loss(&g).unwrap());
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
