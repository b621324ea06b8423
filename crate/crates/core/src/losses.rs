//! Loss terms for adversarial translation training.
//!
//! Every builder takes logits or tensors already on a [`Tape`] and returns a
//! scalar node, so gradients flow to whichever parameters the caller bound as
//! trainable. Value-level helpers (fresh tape per call) back the exactness
//! tests and keep the formulas usable outside training.

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::Result;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Content adversarial term (both sides).
    pub content_adv: f64,
    /// Domain adversarial term (both sides).
    pub domain_adv: f64,
    /// Domain classification on translated images (generator update).
    pub domain_class_gen: f64,
    /// Domain classification on real images (discriminator update).
    pub domain_class_disc: f64,
    /// Class / phenotype prediction from the attribute latent.
    pub prediction: f64,
    /// KL of the attribute posterior against the unit Gaussian.
    pub kl: f64,
    /// L1 shrinkage on feature-attribution maps.
    pub fa_map: f64,
    /// Latent regression: re-encoded attribute mean vs the drawn prior.
    pub latent_cycle: f64,
    /// Self and cycle reconstruction.
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            content_adv: 1.0,
            domain_adv: 1.0,
            domain_class_gen: 5.0,
            domain_class_disc: 1.0,
            prediction: 10.0,
            kl: 0.01,
            fa_map: 10.0,
            latent_cycle: 1.0,
            reconstruction: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::error::Result<()> {
        let all = [
            self.content_adv,
            self.domain_adv,
            self.domain_class_gen,
            self.domain_class_disc,
            self.prediction,
            self.kl,
            self.fa_map,
            self.latent_cycle,
            self.reconstruction,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(crate::error::Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn filled_like<F: Scalar>(tape: &mut Tape<F>, like: Var, value: f64) -> Var {
    let shape = tape.value(like).raw_dim();
    tape.constant(ArrayD::from_elem(shape, F::from_f64(value)))
}

/// Content-discriminator side: push class-0 content toward logit 0 and
/// class-1 content toward logit 1.
pub fn content_adversarial_disc<F: Scalar>(tape: &mut Tape<F>, logits_x: Var, logits_y: Var) -> Var {
    let zeros = filled_like(tape, logits_x, 0.0);
    let ones = filled_like(tape, logits_y, 1.0);
    let lx = tape.bce_with_logits_mean(logits_x, zeros, None);
    let ly = tape.bce_with_logits_mean(logits_y, ones, None);
    tape.weighted_sum(&[(lx, 0.5), (ly, 0.5)])
}

/// Content-encoder side: pull both domains toward the uninformative 0.5
/// target, so content features stop predicting the class.
pub fn content_adversarial_enc<F: Scalar>(tape: &mut Tape<F>, logits_x: Var, logits_y: Var) -> Var {
    let half_x = filled_like(tape, logits_x, 0.5);
    let half_y = filled_like(tape, logits_y, 0.5);
    let lx = tape.bce_with_logits_mean(logits_x, half_x, None);
    let ly = tape.bce_with_logits_mean(logits_y, half_y, None);
    tape.weighted_sum(&[(lx, 0.5), (ly, 0.5)])
}

/// Generator side of the domain GAN: every fake batch toward "real".
pub fn domain_adversarial_gen<F: Scalar>(tape: &mut Tape<F>, fake_logits: &[Var]) -> Var {
    assert!(!fake_logits.is_empty());
    let w = 1.0 / fake_logits.len() as f64;
    let terms: Vec<(Var, f64)> = fake_logits
        .iter()
        .map(|&l| {
            let ones = filled_like(tape, l, 1.0);
            (tape.bce_with_logits_mean(l, ones, None), w)
        })
        .collect();
    tape.weighted_sum(&terms)
}

/// Discriminator side of the domain GAN: real batches toward 1, fakes toward
/// 0, each side carrying half the weight.
pub fn domain_adversarial_disc<F: Scalar>(
    tape: &mut Tape<F>,
    real_logits: &[Var],
    fake_logits: &[Var],
) -> Var {
    assert!(!real_logits.is_empty() && !fake_logits.is_empty());
    let mut terms = Vec::new();
    let wr = 0.5 / real_logits.len() as f64;
    for &l in real_logits {
        let ones = filled_like(tape, l, 1.0);
        terms.push((tape.bce_with_logits_mean(l, ones, None), wr));
    }
    let wf = 0.5 / fake_logits.len() as f64;
    for &l in fake_logits {
        let zeros = filled_like(tape, l, 0.0);
        terms.push((tape.bce_with_logits_mean(l, zeros, None), wf));
    }
    tape.weighted_sum(&terms)
}

/// Prediction loss from the attribute latent: class BCE, plus smooth-L1
/// (β = 1) on the phenotype when regression is enabled.
pub fn prediction_loss<F: Scalar>(
    tape: &mut Tape<F>,
    class_logit: Var,
    class_target: Var,
    regression: Var,
    regression_target: Var,
    regression_enabled: bool,
) -> Var {
    let bce = tape.bce_with_logits_mean(class_logit, class_target, None);
    if regression_enabled {
        let sl1 = tape.smooth_l1_mean(regression, regression_target, 1.0);
        tape.weighted_sum(&[(bce, 1.0), (sl1, 1.0)])
    } else {
        bce
    }
}

/// Mean absolute value across a set of feature-attribution maps.
pub fn fa_map_loss<F: Scalar>(tape: &mut Tape<F>, maps: &[Var]) -> Var {
    assert!(!maps.is_empty());
    let w = 1.0 / maps.len() as f64;
    let terms: Vec<(Var, f64)> = maps.iter().map(|&m| (tape.mean_abs(m), w)).collect();
    tape.weighted_sum(&terms)
}

/// L1 between re-encoded attribute means and the priors they were decoded
/// from, averaged over the given pairs.
pub fn latent_cycle_loss<F: Scalar>(tape: &mut Tape<F>, pairs: &[(Var, Var)]) -> Var {
    assert!(!pairs.is_empty());
    let w = 1.0 / pairs.len() as f64;
    let terms: Vec<(Var, f64)> = pairs
        .iter()
        .map(|&(re, prior)| {
            let d = tape.sub(re, prior);
            (tape.mean_abs(d), w)
        })
        .collect();
    tape.weighted_sum(&terms)
}

/// Reconstruction: `mean|a−b| + mean(a−b)²` summed over the given pairs
/// (self-reconstructions and cycle reconstructions of both domains).
pub fn reconstruction_loss<F: Scalar>(tape: &mut Tape<F>, pairs: &[(Var, Var)]) -> Var {
    assert!(!pairs.is_empty());
    let mut terms = Vec::new();
    for &(recon, target) in pairs {
        let d = tape.sub(recon, target);
        terms.push((tape.mean_abs(d), 1.0));
        terms.push((tape.mean_sq(d), 1.0));
    }
    tape.weighted_sum(&terms)
}

// ---- value-level helpers ----

/// KL(q ‖ N(0, I)) summed over latent dims, averaged over the batch.
pub fn kl_value<F: Scalar>(mean: &ArrayD<F>, log_var: &ArrayD<F>) -> Result<f64> {
    let mut tape = Tape::new();
    let m = tape.constant(mean.clone());
    let lv = tape.constant(log_var.clone());
    let kl = tape.gaussian_kl_mean(m, lv);
    Ok(tape.scalar(kl).as_f64())
}

/// Smooth-L1 with the given β, averaged over elements.
pub fn smooth_l1_value<F: Scalar>(pred: &ArrayD<F>, target: &ArrayD<F>, beta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let l = tape.smooth_l1_mean(p, t, beta);
    Ok(tape.scalar(l).as_f64())
}

/// Mean binary cross-entropy on logits.
pub fn bce_value<F: Scalar>(logits: &ArrayD<F>, targets: &ArrayD<F>) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let t = tape.constant(targets.clone());
    let b = tape.bce_with_logits_mean(l, t, None);
    Ok(tape.scalar(b).as_f64())
}
