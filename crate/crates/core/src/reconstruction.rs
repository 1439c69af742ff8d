//! Reconstruction objective: the inversion terms plus perturbation
//! consistency, image priors and a weight-gradient-norm penalty.
//!
//! ```text
//! L_rec = alpha KL + alpha' KL_pert + beta CE + beta' CE_pert
//!       + gamma cosine + delta ortho + eta1 var + eta2 pix + eta3 grad
//! ```
//!
//! Conditions are hot (one-hot targets). The gradient penalty differentiates
//! through the classifier's weight gradient, so it needs second-order
//! autograd; [`ensure_second_order`] probes for it before training starts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::classifier::{FrozenClassifier, WeightGradScope};
use crate::conditioning::{Condition, ConditionBatch};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorSpec};
use crate::inversion::{
    at_step, base_terms, ce_loss, check_compatible, check_finite, kl_loss, scalar, weighted_total,
    BatchStream, GeneratorTrainer, LossBreakdown, LossWeights, MetricRecord, Schedule, TrainOutput,
    TrainSeeds, EVAL_SEED_OFFSET,
};

pub const MAX_EPSILON: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// L-infinity radius in pixel units.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            seed: 0,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_EPSILON).contains(&self.epsilon) {
            return Err(Error::Argument(format!(
                "perturbation epsilon {} outside [0, {MAX_EPSILON}]",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn perturber(&self) -> Result<Perturber> {
        self.validate()?;
        Ok(Perturber {
            epsilon: self.epsilon,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
        })
    }
}

/// Seeded source of uniform L-infinity perturbations, one draw per call.
#[derive(Debug, Clone)]
pub struct Perturber {
    epsilon: f64,
    rng: ChaCha8Rng,
}

impl Perturber {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn perturb(&mut self, images: &Tensor) -> Result<Tensor> {
        linf_perturb(images, self.epsilon, &mut self.rng)
    }
}

/// Shifts every pixel by an independent `U[-eps, eps]` draw and clamps to
/// `[0, 1]`. Gradients flow to `images` through unclamped pixels.
pub fn linf_perturb<R: Rng>(images: &Tensor, epsilon: f64, rng: &mut R) -> Result<Tensor> {
    if !(0.0..=MAX_EPSILON).contains(&epsilon) {
        return Err(Error::Argument(format!(
            "perturbation epsilon {epsilon} outside [0, {MAX_EPSILON}]"
        )));
    }
    if epsilon == 0.0 {
        return Ok(images.shallow_clone());
    }
    let count = images.numel();
    let noise: Vec<f32> = (0..count)
        .map(|_| rng.random_range(-epsilon..=epsilon) as f32)
        .collect();
    let noise = Tensor::from_slice(&noise)
        .view(images.size().as_slice())
        .to_kind(images.kind());
    Ok((images + noise).clamp(0.0, 1.0))
}

fn check_images(images: &Tensor, what: &str) -> Result<()> {
    if images.dim() != 4 || images.size()[0] == 0 {
        return Err(Error::Argument(format!(
            "{what}: expected a non-empty (B, C, H, W) batch, got {:?}",
            images.size()
        )));
    }
    Ok(())
}

/// Batch mean of summed squared forward differences along height and width.
pub fn variational_loss(images: &Tensor) -> Result<Tensor> {
    check_images(images, "variational_loss")?;
    let size = images.size();
    let (b, h, w) = (size[0], size[2], size[3]);
    if h < 2 || w < 2 {
        return Err(Error::Argument(format!("variational_loss needs H, W >= 2, got {h}x{w}")));
    }
    let kind = images.kind();
    let dv = images.narrow(2, 1, h - 1) - images.narrow(2, 0, h - 1);
    let dh = images.narrow(3, 1, w - 1) - images.narrow(3, 0, w - 1);
    Ok((dv.square().sum(kind) + dh.square().sum(kind)) / b as f64)
}

/// Batch mean of the total excursion below 0 and above 1.
pub fn pixel_loss(images: &Tensor) -> Result<Tensor> {
    check_images(images, "pixel_loss")?;
    let kind = images.kind();
    let b = images.size()[0] as f64;
    let below = (-images).relu().sum(kind);
    let above = (images - 1.0).relu().sum(kind);
    Ok((below + above) / b)
}

/// Mean cross-entropy computed from log-softmax; the loss differentiated by
/// the gradient penalty.
fn logit_cross_entropy(logits: &Tensor, labels: &Tensor) -> Tensor {
    -logits
        .log_softmax(-1, logits.kind())
        .gather(1, &labels.unsqueeze(1), false)
        .mean(logits.kind())
}

/// L2 norm over all classifier weight gradients of the cross-entropy on
/// `(images, labels)`, kept differentiable with respect to `images`.
///
/// Must be called with the classifier's [`WeightGradScope`] held; the graph
/// stays valid until the scope is dropped.
pub fn gradient_norm_loss(
    scope: &WeightGradScope<'_>,
    clf: &FrozenClassifier,
    images: &Tensor,
    labels: &Tensor,
) -> Result<Tensor> {
    let n = clf.num_classes() as i64;
    if labels.dim() != 1 || labels.size()[0] != images.size()[0] {
        return Err(Error::Argument("gradient_norm_loss: one label per image required".into()));
    }
    let (lo, hi) = (labels.min().int64_value(&[]), labels.max().int64_value(&[]));
    if lo < 0 || hi >= n {
        return Err(Error::Argument(format!("labels span [{lo}, {hi}], expected [0, {n})")));
    }
    let logits = clf.logits(images)?;
    let ce = logit_cross_entropy(&logits, labels);
    let params = scope.parameters();
    let grads = Tensor::f_run_backward(&[&ce], &params, true, true)
        .map_err(|e| Error::Capability(format!("second-order autograd failed: {e}")))?;
    let mut sq = Tensor::zeros([], (logits.kind(), logits.device()));
    for g in &grads {
        sq = sq + g.square().sum(logits.kind());
    }
    // The tiny offset keeps the backward pass finite at an exact stationary point.
    Ok((sq + 1e-20).sqrt())
}

/// Verifies the backend can differentiate through a gradient.
pub fn ensure_second_order() -> Result<()> {
    let probe = || -> std::result::Result<f64, tch::TchError> {
        let w = Tensor::f_from_slice(&[0.5f64, -1.0])?.set_requires_grad(true);
        let x = Tensor::f_from_slice(&[2.0f64, 3.0])?.set_requires_grad(true);
        let loss = (&w * &x).tanh().sum(Kind::Double);
        let g = Tensor::f_run_backward(&[&loss], &[&w], true, true)?;
        let norm = g[0].square().sum(Kind::Double);
        let gx = Tensor::f_run_backward(&[&norm], &[&x], false, false)?;
        gx[0].abs().f_sum(Kind::Double)?.f_double_value(&[])
    };
    match probe() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(()),
        Ok(v) => Err(Error::Capability(format!("second-order probe returned {v}"))),
        Err(e) => Err(Error::Capability(format!("second-order autograd unavailable: {e}"))),
    }
}

/// One generator update on the reconstruction objective.
pub fn reconstruction_step(
    clf: &FrozenClassifier,
    trainer: &mut GeneratorTrainer,
    latents: &Tensor,
    conds: &[Condition],
    w: &LossWeights,
    perturber: &mut Perturber,
) -> Result<LossBreakdown> {
    w.validate()?;
    let batch = ConditionBatch::new(conds)?;
    let images = trainer.generator.generate(latents, &batch, true)?;
    let t = base_terms(clf, &images, &batch)?;

    let perturbed = perturber.perturb(&images)?;
    let q_pert = clf.predict_proba(&perturbed)?;
    let kl_pert = kl_loss(&batch.dist.to_kind(q_pert.kind()), &q_pert)?;
    let ce_pert = ce_loss(&batch.labels, &q_pert)?;
    let var = variational_loss(&images)?;
    let pix = pixel_loss(&images)?;

    let (scope, grad) = if w.eta3 > 0.0 {
        let scope = clf.weight_grad_scope();
        let grad = gradient_norm_loss(&scope, clf, &images, &batch.labels)?;
        (Some(scope), grad)
    } else {
        let norm = clf.weight_grad_norm(&images.detach(), &batch.labels)?;
        (None, Tensor::from(norm))
    };

    let total = weighted_total(&[
        (w.alpha, &t.kl),
        (w.alpha_p, &kl_pert),
        (w.beta, &t.ce),
        (w.beta_p, &ce_pert),
        (w.gamma, &t.cosine),
        (w.delta, &t.ortho),
        (w.eta1, &var),
        (w.eta2, &pix),
        (w.eta3, &grad),
    ]);
    let breakdown = LossBreakdown {
        kl: scalar(&t.kl),
        ce: scalar(&t.ce),
        cosine: scalar(&t.cosine),
        ortho: scalar(&t.ortho),
        kl_pert: scalar(&kl_pert),
        ce_pert: scalar(&ce_pert),
        var: scalar(&var),
        pix: scalar(&pix),
        grad: scalar(&grad),
        total: scalar(&total),
    };
    check_finite(&breakdown, "reconstruction step", 0)?;
    trainer.apply(&total);
    drop(scope);
    Ok(breakdown)
}

/// Trains a fresh generator on the reconstruction objective with hot
/// conditions.
pub fn train_reconstruction(
    clf: &FrozenClassifier,
    gen_spec: &GeneratorSpec,
    w: &LossWeights,
    pert: &PerturbationConfig,
    schedule: &Schedule,
    seeds: TrainSeeds,
) -> Result<TrainOutput> {
    w.validate()?;
    schedule.validate()?;
    pert.validate()?;
    check_compatible(clf, gen_spec)?;
    if w.eta3 > 0.0 {
        ensure_second_order()?;
    }
    let generator = Generator::new(gen_spec, seeds.generator)?;
    let mut trainer = GeneratorTrainer::new(generator, schedule)?;
    let mut stream = BatchStream::new(gen_spec, seeds, schedule.batch_size, true)?;
    let mut perturber = pert.perturber()?;
    let mut log = Vec::with_capacity(schedule.steps);
    let mut final_agreement = 0.0;
    for step in 1..=schedule.steps {
        let (z, conds) = stream.next_batch()?;
        let losses = reconstruction_step(clf, &mut trainer, &z, &conds, w, &mut perturber)
            .map_err(|e| at_step(e, step))?;
        let label_agreement = if step % schedule.eval_interval == 0 || step == schedule.steps {
            let a = crate::evaluation::label_agreement(
                clf,
                &trainer.generator,
                schedule.eval_count,
                seeds.conditions ^ EVAL_SEED_OFFSET,
                true,
            )?;
            log::info!(
                "reconstruction step {step}: total {:.4} ce {:.4} grad {:.4} agreement {a:.3}",
                losses.total,
                losses.ce,
                losses.grad
            );
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(rows: &[&[f64]]) -> Tensor {
        let (h, w) = (rows.len() as i64, rows[0].len() as i64);
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_slice(&flat).view([1, 1, h, w])
    }

    fn v(t: &Tensor) -> f64 {
        t.double_value(&[])
    }

    #[test]
    fn variational_examples() {
        let flat = Tensor::full([2, 3, 5, 5], 0.3, (Kind::Double, tch::Device::Cpu));
        assert_eq!(v(&variational_loss(&flat).unwrap()), 0.0);
        assert!((v(&variational_loss(&image(&[&[0.0, 1.0], &[0.0, 1.0]])).unwrap()) - 2.0).abs() < 1e-12);
        assert!((v(&variational_loss(&image(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap()) - 4.0).abs() < 1e-12);
        assert!(variational_loss(&image(&[&[0.5]])).is_err());
    }

    #[test]
    fn pixel_examples() {
        assert_eq!(v(&pixel_loss(&image(&[&[0.0, 1.0], &[0.5, 0.2]])).unwrap()), 0.0);
        assert!((v(&pixel_loss(&image(&[&[-0.5, 1.0], &[0.5, 0.2]])).unwrap()) - 0.5).abs() < 1e-12);
        assert!((v(&pixel_loss(&image(&[&[1.25, -0.25], &[0.5, 0.2]])).unwrap()) - 0.5).abs() < 1e-12);
        let mut batch = vec![0.5f64; 4 * 4];
        batch[0] = -0.5;
        let t = Tensor::from_slice(&batch).view([4, 1, 2, 2]);
        assert!((v(&pixel_loss(&t).unwrap()) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let x = Tensor::rand([3, 1, 4, 4], (Kind::Float, tch::Device::Cpu));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(linf_perturb(&x, 0.0, &mut rng).unwrap().equal(&x));
        assert!(linf_perturb(&x, 0.6, &mut rng).is_err());
        assert!(linf_perturb(&x, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mid_gray_shift_reaches_the_radius() {
        let x = Tensor::full([64, 1, 28, 28], 0.5, (Kind::Float, tch::Device::Cpu));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = linf_perturb(&x, 0.05, &mut rng).unwrap();
        let max = v(&(out - &x).abs().max());
        assert!(max > 0.045 && max <= 0.05 + 1e-7, "{max}");
    }

    #[test]
    fn second_order_is_available() {
        ensure_second_order().unwrap();
    }

    fn flips(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, rows * cols)
    }

    proptest! {
        #[test]
        fn variational_is_flip_invariant(px in flips(5, 6)) {
            let x = Tensor::from_slice(&px).view([1, 1, 5, 6]);
            let base = v(&variational_loss(&x).unwrap());
            let vflip = v(&variational_loss(&x.flip([2])).unwrap());
            let hflip = v(&variational_loss(&x.flip([3])).unwrap());
            prop_assert!((base - vflip).abs() < 1e-9 && (base - hflip).abs() < 1e-9);
        }

        #[test]
        fn pixel_loss_zero_iff_in_range(px in prop::collection::vec(-0.5f64..1.5, 12)) {
            let x = Tensor::from_slice(&px).view([1, 1, 3, 4]);
            let inside = px.iter().all(|p| (0.0..=1.0).contains(p));
            prop_assert_eq!(v(&pixel_loss(&x).unwrap()) == 0.0, inside);
        }

        #[test]
        fn perturbation_stays_in_ball_and_range(eps in 0.0f64..0.5, seed in any::<u64>()) {
            let x = Tensor::rand([2, 1, 6, 6], (Kind::Double, tch::Device::Cpu));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = linf_perturb(&x, eps, &mut rng).unwrap();
            prop_assert!(v(&(&out - &x).abs().max()) <= eps + 1e-7);
            prop_assert!(v(&out.min()) >= 0.0 && v(&out.max()) <= 1.0);
        }
    }
}
