//! The training procedure: three-batch iterations with a twice-updated
//! content discriminator, rejection sampling of prior attributes, a
//! classification phase followed by regression fine-tuning, per-epoch CSV
//! logs, and bit-exact checkpoint resume.
//!
//! One [`Adam`] instance covers every parameter; the content discriminator's
//! lower learning rate is a per-prefix override, and each update only steps
//! the parameters that received gradients from its own tape.

use crate::autodiff::{Adam, ParamStore, Scalar, Tape};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evalmetrics::{self, MeanStd};
use crate::losses::{self, LossWeights};
use crate::nets::{Model, ModelConfig};
use crate::rng::{normal_f64, stream_rng};
use crate::synthdata::{DatasetManifest, LoadedRecord, Split};
use indexmap::IndexMap;
use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// RNG stream ids, kept distinct from the dataset generator's streams.
const RNG_STREAM_CLASSIFICATION: u64 = 100;
const RNG_STREAM_REGRESSION: u64 = 101;

const OPT_M_PREFIX: &str = "opt.m.";
const OPT_V_PREFIX: &str = "opt.v.";

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate for the content discriminator.
    pub lr_content_disc: f64,
    /// Learning rate for every other component.
    pub lr_other: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Total images per batch, split evenly across the two classes.
    pub batch_size: usize,
    /// Epochs per phase.
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Whether to run the regression fine-tuning phase after classification.
    pub regression_enabled: bool,
    /// Attempt budget for rejection sampling of prior attributes.
    pub rejection_max_attempts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_content_disc: 4e-5,
            lr_other: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 16,
            epochs: 50,
            weights: LossWeights::default(),
            seed: 0,
            regression_enabled: true,
            rejection_max_attempts: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_content_disc > 0.0 && self.lr_other > 0.0)
            || !self.lr_content_disc.is_finite()
            || !self.lr_other.is_finite()
        {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        for beta in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("adam betas must lie in [0,1), got {beta}")));
            }
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(
                "batch_size must be an even number ≥ 2 so each class is represented".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.rejection_max_attempts == 0 {
            return Err(Error::Config("rejection_max_attempts must be ≥ 1".into()));
        }
        self.weights.validate()
    }

    fn per_class(&self) -> usize {
        self.batch_size / 2
    }
}

/// Per-term loss values of one iteration (or a mean over an epoch).
/// Terms are unweighted; the totals are the weighted sums actually optimized.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LossReport {
    pub content_adv_disc: f64,
    pub content_adv_enc: f64,
    pub domain_adv_gen: f64,
    pub domain_adv_disc: f64,
    pub domain_class_gen: f64,
    pub domain_class_disc: f64,
    pub prediction: f64,
    pub kl: f64,
    pub fa_map: f64,
    pub latent_cycle: f64,
    pub reconstruction: f64,
    pub total_eg: f64,
    pub total_d: f64,
    pub total_dc: f64,
    /// Rejection-sampling draws that exhausted the budget and fell back to
    /// the best-scoring sample.
    pub rejection_fallbacks: usize,
}

impl LossReport {
    fn float_fields(&mut self) -> [&mut f64; 14] {
        [
            &mut self.content_adv_disc,
            &mut self.content_adv_enc,
            &mut self.domain_adv_gen,
            &mut self.domain_adv_disc,
            &mut self.domain_class_gen,
            &mut self.domain_class_disc,
            &mut self.prediction,
            &mut self.kl,
            &mut self.fa_map,
            &mut self.latent_cycle,
            &mut self.reconstruction,
            &mut self.total_eg,
            &mut self.total_d,
            &mut self.total_dc,
        ]
    }

    fn accumulate(&mut self, other: &LossReport) {
        let mut o = *other;
        for (a, b) in self.float_fields().into_iter().zip(o.float_fields()) {
            *a += *b;
        }
        self.rejection_fallbacks += other.rejection_fallbacks;
    }

    fn scale(&mut self, factor: f64) {
        for f in self.float_fields() {
            *f *= factor;
        }
    }
}

/// One class's slice of a batch.
#[derive(Clone, Debug)]
pub struct ClassBatch {
    /// `[n, 1, H, W]`
    pub images: ArrayD<f32>,
    pub phenotypes: Vec<f64>,
}

impl ClassBatch {
    pub fn from_records(records: &[LoadedRecord], indices: &[usize]) -> ClassBatch {
        assert!(!indices.is_empty());
        let (h, w) = records[indices[0]].image.dim();
        let mut images = Array4::<f32>::zeros((indices.len(), 1, h, w));
        let mut phenotypes = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            images.slice_mut(ndarray::s![k, 0, .., ..]).assign(&records[i].image);
            phenotypes.push(records[i].phenotype);
        }
        ClassBatch { images: images.into_dyn(), phenotypes }
    }

    pub fn len(&self) -> usize {
        self.phenotypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phenotypes.is_empty()
    }

    fn phenotype_column(&self) -> ArrayD<f32> {
        ArrayD::from_shape_vec(
            IxDyn(&[self.len(), 1]),
            self.phenotypes.iter().map(|&p| p as f32).collect(),
        )
        .expect("column shape")
    }
}

/// Training split partitioned by class.
pub struct TrainSet {
    pub class0: Vec<LoadedRecord>,
    pub class1: Vec<LoadedRecord>,
}

impl TrainSet {
    pub fn from_records(records: Vec<LoadedRecord>) -> Result<TrainSet> {
        let (class1, class0): (Vec<_>, Vec<_>) =
            records.into_iter().partition(|r| r.class_label == 1);
        if class0.is_empty() || class1.is_empty() {
            return Err(Error::Config(format!(
                "training needs both classes, got {} of class 0 and {} of class 1",
                class0.len(),
                class1.len()
            )));
        }
        Ok(TrainSet { class0, class1 })
    }

    pub fn min_class_count(&self) -> usize {
        self.class0.len().min(self.class1.len())
    }
}

/// Validation summary for one epoch.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ValMetrics {
    /// Mean NCC of |FA| maps against |ground truth| over cross-class pairs;
    /// `None` when every pair was degenerate.
    pub ncc: Option<f64>,
    pub ncc_n: usize,
    pub accuracy: f64,
    pub mae: f64,
}

/// Draw one `z ~ N(0, I)` accepted by the classifier for `target_class`
/// (sigmoid threshold 0.5 on the returned class-1 logit). Returns the sample
/// and the number of draws used. Exhausting `max_attempts` yields a
/// rejection-exhausted error carrying the best-scoring sample seen.
pub fn rejection_sample_attr<F: Scalar>(
    classify: &mut dyn FnMut(&ArrayD<F>) -> Result<f64>,
    target_class: u8,
    prior_shape: &[usize],
    max_attempts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ArrayD<F>, usize)> {
    if target_class > 1 {
        return Err(Error::Contract(format!("target class must be 0 or 1, got {target_class}")));
    }
    if max_attempts == 0 {
        return Err(Error::Config("max_attempts must be ≥ 1".into()));
    }
    let mut best_logit = if target_class == 1 { f64::NEG_INFINITY } else { f64::INFINITY };
    let mut best: Option<ArrayD<F>> = None;
    for attempt in 1..=max_attempts {
        let sample =
            ArrayD::from_shape_simple_fn(IxDyn(prior_shape), || F::from_f64(normal_f64(rng)));
        let logit = classify(&sample)?;
        let assigned = u8::from(logit >= 0.0);
        if assigned == target_class {
            return Ok((sample, attempt));
        }
        let better = if target_class == 1 { logit > best_logit } else { logit < best_logit };
        if better {
            best_logit = logit;
            best = Some(sample);
        }
    }
    Err(Error::RejectionExhausted {
        attempts: max_attempts,
        best_logit,
        best_sample: Box::new(best.expect("at least one attempt").mapv(|v| v.as_f64())),
    })
}

fn draw_normal(rng: &mut ChaCha8Rng, shape: &[usize], sigma: f64) -> ArrayD<f32> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || (normal_f64(rng) * sigma) as f32)
}

/// A batch of rejection-sampled prior attributes `[n, C_a, h, w]`, with the
/// count of draws that fell back to the best-scoring sample after exhausting
/// the attempt budget.
fn sample_attr_prior_batch(
    model: &Model<f32>,
    n: usize,
    target_class: u8,
    max_attempts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ArrayD<f32>, usize)> {
    let s = model.config.attr_shape();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[n, s[0], s[1], s[2]]));
    let mut fallbacks = 0usize;
    let mut classify = |sample: &ArrayD<f32>| -> Result<f64> {
        let batched = sample.clone().insert_axis(Axis(0));
        Ok(model.predict_values(&batched)?[0].class_logit)
    };
    for i in 0..n {
        let sample = match rejection_sample_attr(&mut classify, target_class, &s, max_attempts, rng)
        {
            Ok((sample, _attempts)) => sample,
            Err(Error::RejectionExhausted { best_sample, .. }) => {
                fallbacks += 1;
                best_sample.mapv(|v| v as f32)
            }
            Err(e) => return Err(e),
        };
        out.index_axis_mut(Axis(0), i).assign(&sample);
    }
    Ok((out, fallbacks))
}

fn stack_images(records: &[&LoadedRecord]) -> ArrayD<f32> {
    let (h, w) = records[0].image.dim();
    let mut images = Array4::<f32>::zeros((records.len(), 1, h, w));
    for (k, rec) in records.iter().enumerate() {
        images.slice_mut(ndarray::s![k, 0, .., ..]).assign(&rec.image);
    }
    images.into_dyn()
}

/// Serialized mutable state; combined with the parameter and moment tensors
/// this restores a [`Trainer`] bit-exactly.
#[derive(Serialize, Deserialize)]
struct TrainerState {
    train_config: TrainConfig,
    regression_active: bool,
    iterations_done: u64,
    rejection_fallbacks_total: u64,
    rng: ChaCha8Rng,
    adam_steps: Vec<(String, u64)>,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    /// Whether the smooth-L1 regression term is active (phase B).
    pub regression_active: bool,
    pub iterations_done: u64,
    pub rejection_fallbacks_total: u64,
    opt: Adam<f32>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let model = Model::init(model_config)?;
        Ok(Self::assemble(model, config, RNG_STREAM_CLASSIFICATION))
    }

    fn assemble(model: Model<f32>, config: TrainConfig, rng_stream: u64) -> Trainer {
        let opt = Adam::new(config.lr_other, config.adam_beta1, config.adam_beta2)
            .with_lr_override("disc_content.", config.lr_content_disc);
        let rng = stream_rng(config.seed, rng_stream);
        Trainer {
            model,
            config,
            regression_active: false,
            iterations_done: 0,
            rejection_fallbacks_total: 0,
            opt,
            rng,
        }
    }

    /// Switch to regression fine-tuning: fresh optimizer state and RNG
    /// stream, smooth-L1 term active.
    pub fn begin_regression_phase(&mut self) {
        self.regression_active = true;
        self.opt = Adam::new(self.config.lr_other, self.config.adam_beta1, self.config.adam_beta2)
            .with_lr_override("disc_content.", self.config.lr_content_disc);
        self.rng = stream_rng(self.config.seed, RNG_STREAM_REGRESSION);
    }

    /// One content-discriminator update on one batch pair. Returns the
    /// unweighted content-adversarial loss value.
    pub fn content_disc_update(&mut self, b0: &ClassBatch, b1: &ClassBatch) -> Result<f64> {
        let sigma = self.model.config.content_noise_sigma;
        let cs = self.model.config.content_shape();
        let shape0 = [b0.len(), cs[0], cs[1], cs[2]];
        let shape1 = [b1.len(), cs[0], cs[1], cs[2]];
        let noise0 = draw_normal(&mut self.rng, &shape0, sigma);
        let noise1 = draw_normal(&mut self.rng, &shape1, sigma);
        // content features without encoder gradients
        let content_of = |model: &Model<f32>, images: &ArrayD<f32>, noise: &ArrayD<f32>| {
            let mut t = Tape::new();
            let x = t.constant(images.clone());
            let c = model.encode_content(&mut t, x, Some(noise), false)?;
            Ok::<ArrayD<f32>, Error>(t.value(c).clone())
        };
        let c0 = content_of(&self.model, &b0.images, &noise0)?;
        let c1 = content_of(&self.model, &b1.images, &noise1)?;

        let (loss_value, grads) = {
            let mut tape = Tape::new();
            let v0 = tape.constant(c0);
            let v1 = tape.constant(c1);
            let l0 = self.model.discriminate_content(&mut tape, v0, true)?;
            let l1 = self.model.discriminate_content(&mut tape, v1, true)?;
            let loss = losses::content_adversarial_disc(&mut tape, l0, l1);
            let total = tape.weighted_sum(&[(loss, self.config.weights.content_adv)]);
            tape.ensure_finite(total, "content discriminator objective")?;
            tape.backward(total);
            (tape.scalar(loss) as f64, tape.param_grads())
        };
        self.opt.step(&mut self.model.params, &grads);
        Ok(loss_value)
    }

    /// The joint encoder/generator update followed by the domain-discriminator
    /// update, both on the same batch pair. Fakes are reused detached.
    pub fn generator_update(&mut self, b0: &ClassBatch, b1: &ClassBatch) -> Result<LossReport> {
        if b0.is_empty() || b0.len() != b1.len() {
            return Err(Error::Contract(format!(
                "class batches must be non-empty and equal-sized, got {} and {}",
                b0.len(),
                b1.len()
            )));
        }
        let n = b0.len();
        let w = self.config.weights;
        let a = self.model.config.attr_shape();
        let c = self.model.config.content_shape();
        let attr_shape = [n, a[0], a[1], a[2]];
        let content_shape = [n, c[0], c[1], c[2]];
        let sigma = self.model.config.content_noise_sigma;

        // every stochastic input is drawn up front, in a fixed order
        let eps_x = draw_normal(&mut self.rng, &attr_shape, 1.0);
        let eps_y = draw_normal(&mut self.rng, &attr_shape, 1.0);
        let noise_x = draw_normal(&mut self.rng, &content_shape, sigma);
        let noise_y = draw_normal(&mut self.rng, &content_shape, sigma);
        let noise_v = draw_normal(&mut self.rng, &content_shape, sigma);
        let noise_mu = draw_normal(&mut self.rng, &content_shape, sigma);
        let eps_cc_x = draw_normal(&mut self.rng, &attr_shape, 1.0);
        let eps_cc_y = draw_normal(&mut self.rng, &attr_shape, 1.0);
        let attempts = self.config.rejection_max_attempts;
        let (z_r1, fb1) = sample_attr_prior_batch(&self.model, n, 1, attempts, &mut self.rng)?;
        let (z_r0, fb0) = sample_attr_prior_batch(&self.model, n, 0, attempts, &mut self.rng)?;

        let mut report = LossReport {
            rejection_fallbacks: fb0 + fb1,
            ..Default::default()
        };

        let (grads, fakes) = {
            let m = &self.model;
            let mut tape = Tape::new();
            let x = tape.constant(b0.images.clone());
            let y = tape.constant(b1.images.clone());
            let zeros_n = tape.constant(ArrayD::<f32>::zeros(IxDyn(&[n, 1])));
            let ones_n = tape.constant(ArrayD::<f32>::from_elem(IxDyn(&[n, 1]), 1.0));
            let t_x = tape.constant(b0.phenotype_column());
            let t_y = tape.constant(b1.phenotype_column());

            let (mean_x, lv_x) = m.encode_attr(&mut tape, x, true)?;
            let ax = m.attr_sample(&mut tape, mean_x, lv_x, Some(&eps_x));
            let (mean_y, lv_y) = m.encode_attr(&mut tape, y, true)?;
            let ay = m.attr_sample(&mut tape, mean_y, lv_y, Some(&eps_y));
            let cx = m.encode_content(&mut tape, x, Some(&noise_x), true)?;
            let cy = m.encode_content(&mut tape, y, Some(&noise_y), true)?;
            let px = m.predict(&mut tape, ax.sample, true)?;
            let py = m.predict(&mut tape, ay.sample, true)?;

            let x_hat = m.generate(&mut tape, cx, ax.sample, true)?;
            let y_hat = m.generate(&mut tape, cy, ay.sample, true)?;
            let v = m.generate(&mut tape, cx, ay.sample, true)?;
            let mu = m.generate(&mut tape, cy, ax.sample, true)?;
            let zr1 = tape.constant(z_r1.clone());
            let zr0 = tape.constant(z_r0.clone());
            let v_r = m.generate(&mut tape, cx, zr1, true)?;
            let mu_r = m.generate(&mut tape, cy, zr0, true)?;

            // cyclic reconstruction via the swapped pair
            let cv = m.encode_content(&mut tape, v, Some(&noise_v), true)?;
            let cmu = m.encode_content(&mut tape, mu, Some(&noise_mu), true)?;
            let (mean_mu, lv_mu) = m.encode_attr(&mut tape, mu, true)?;
            let a_mu = m.attr_sample(&mut tape, mean_mu, lv_mu, Some(&eps_cc_x));
            let (mean_v, lv_v) = m.encode_attr(&mut tape, v, true)?;
            let a_v = m.attr_sample(&mut tape, mean_v, lv_v, Some(&eps_cc_y));
            let x_cc = m.generate(&mut tape, cv, a_mu.sample, true)?;
            let y_cc = m.generate(&mut tape, cmu, a_v.sample, true)?;

            // latent cycle on the rejection-sampled path
            let (mean_vr, _) = m.encode_attr(&mut tape, v_r, true)?;
            let (mean_mur, _) = m.encode_attr(&mut tape, mu_r, true)?;

            // frozen critics
            let dc_x = m.discriminate_content(&mut tape, cx, false)?;
            let dc_y = m.discriminate_content(&mut tape, cy, false)?;
            let (r_v, c_v) = m.discriminate_domain(&mut tape, v, false)?;
            let (r_mu, c_mu) = m.discriminate_domain(&mut tape, mu, false)?;
            let (r_vr, c_vr) = m.discriminate_domain(&mut tape, v_r, false)?;
            let (r_mur, c_mur) = m.discriminate_domain(&mut tape, mu_r, false)?;

            let l_content = losses::content_adversarial_enc(&mut tape, dc_x, dc_y);
            let l_adv = losses::domain_adversarial_gen(&mut tape, &[r_v, r_mu, r_vr, r_mur]);
            let b_v = tape.bce_with_logits_mean(c_v, ones_n, None);
            let b_vr = tape.bce_with_logits_mean(c_vr, ones_n, None);
            let b_mu = tape.bce_with_logits_mean(c_mu, zeros_n, None);
            let b_mur = tape.bce_with_logits_mean(c_mur, zeros_n, None);
            let l_class =
                tape.weighted_sum(&[(b_v, 0.25), (b_vr, 0.25), (b_mu, 0.25), (b_mur, 0.25)]);
            let pl_x = losses::prediction_loss(
                &mut tape,
                px.class_logit,
                zeros_n,
                px.regression,
                t_x,
                self.regression_active,
            );
            let pl_y = losses::prediction_loss(
                &mut tape,
                py.class_logit,
                ones_n,
                py.regression,
                t_y,
                self.regression_active,
            );
            let l_pred = tape.weighted_sum(&[(pl_x, 0.5), (pl_y, 0.5)]);
            let kl_x = tape.gaussian_kl_mean(mean_x, lv_x);
            let kl_y = tape.gaussian_kl_mean(mean_y, lv_y);
            let l_kl = tape.weighted_sum(&[(kl_x, 0.5), (kl_y, 0.5)]);
            let m_x = tape.sub(v, x);
            let m_y = tape.sub(mu, y);
            let m_xr = tape.sub(v_r, x);
            let m_yr = tape.sub(mu_r, y);
            let l_fa = losses::fa_map_loss(&mut tape, &[m_x, m_y, m_xr, m_yr]);
            let l_zc = losses::latent_cycle_loss(&mut tape, &[(mean_vr, zr1), (mean_mur, zr0)]);
            let l_rec = losses::reconstruction_loss(
                &mut tape,
                &[(x_hat, x), (y_hat, y), (x_cc, x), (y_cc, y)],
            );
            let total = tape.weighted_sum(&[
                (l_content, w.content_adv),
                (l_adv, w.domain_adv),
                (l_class, w.domain_class_gen),
                (l_pred, w.prediction),
                (l_kl, w.kl),
                (l_fa, w.fa_map),
                (l_zc, w.latent_cycle),
                (l_rec, w.reconstruction),
            ]);
            tape.ensure_finite(total, "generator objective")?;

            report.content_adv_enc = tape.scalar(l_content) as f64;
            report.domain_adv_gen = tape.scalar(l_adv) as f64;
            report.domain_class_gen = tape.scalar(l_class) as f64;
            report.prediction = tape.scalar(l_pred) as f64;
            report.kl = tape.scalar(l_kl) as f64;
            report.fa_map = tape.scalar(l_fa) as f64;
            report.latent_cycle = tape.scalar(l_zc) as f64;
            report.reconstruction = tape.scalar(l_rec) as f64;
            report.total_eg = tape.scalar(total) as f64;

            let fakes = [
                tape.value(v).clone(),
                tape.value(mu).clone(),
                tape.value(v_r).clone(),
                tape.value(mu_r).clone(),
            ];
            tape.backward(total);
            (tape.param_grads(), fakes)
        };
        self.opt.step(&mut self.model.params, &grads);

        // domain discriminator update: real batches with true class labels,
        // the four detached fakes pushed toward "fake"
        let grads = {
            let m = &self.model;
            let mut tape = Tape::new();
            let xr = tape.constant(b0.images.clone());
            let yr = tape.constant(b1.images.clone());
            let zeros_n = tape.constant(ArrayD::<f32>::zeros(IxDyn(&[n, 1])));
            let ones_n = tape.constant(ArrayD::<f32>::from_elem(IxDyn(&[n, 1]), 1.0));
            let (rr_x, rc_x) = m.discriminate_domain(&mut tape, xr, true)?;
            let (rr_y, rc_y) = m.discriminate_domain(&mut tape, yr, true)?;
            let mut fake_logits = Vec::with_capacity(4);
            for fake in &fakes {
                let f = tape.constant(fake.clone());
                let (rf, _cf) = m.discriminate_domain(&mut tape, f, true)?;
                fake_logits.push(rf);
            }
            let l_adv_d = losses::domain_adversarial_disc(&mut tape, &[rr_x, rr_y], &fake_logits);
            let b_x = tape.bce_with_logits_mean(rc_x, zeros_n, None);
            let b_y = tape.bce_with_logits_mean(rc_y, ones_n, None);
            let l_class_d = tape.weighted_sum(&[(b_x, 0.5), (b_y, 0.5)]);
            let total_d = tape
                .weighted_sum(&[(l_adv_d, w.domain_adv), (l_class_d, w.domain_class_disc)]);
            tape.ensure_finite(total_d, "domain discriminator objective")?;
            report.domain_adv_disc = tape.scalar(l_adv_d) as f64;
            report.domain_class_disc = tape.scalar(l_class_d) as f64;
            report.total_d = tape.scalar(total_d) as f64;
            tape.backward(total_d);
            tape.param_grads()
        };
        self.opt.step(&mut self.model.params, &grads);
        Ok(report)
    }

    /// One full iteration: two content-discriminator updates on their own
    /// batch pairs, then the joint encoder/generator and domain-discriminator
    /// update on the third.
    pub fn training_iteration(
        &mut self,
        dc_batches: [(&ClassBatch, &ClassBatch); 2],
        main: (&ClassBatch, &ClassBatch),
    ) -> Result<LossReport> {
        let d1 = self.content_disc_update(dc_batches[0].0, dc_batches[0].1)?;
        let d2 = self.content_disc_update(dc_batches[1].0, dc_batches[1].1)?;
        let mut report = self.generator_update(main.0, main.1)?;
        report.content_adv_disc = 0.5 * (d1 + d2);
        report.total_dc = self.config.weights.content_adv * report.content_adv_disc;
        self.iterations_done += 1;
        self.rejection_fallbacks_total += report.rejection_fallbacks as u64;
        Ok(report)
    }

    /// Draw the three batch pairs for one iteration from the training set.
    pub fn draw_batches(&mut self, data: &TrainSet) -> Result<Vec<(ClassBatch, ClassBatch)>> {
        let per_class = self.config.per_class();
        if data.min_class_count() < per_class {
            return Err(Error::Config(format!(
                "need at least {per_class} records per class, got {} / {}",
                data.class0.len(),
                data.class1.len()
            )));
        }
        let mut out = Vec::with_capacity(3);
        for _ in 0..3 {
            let i0 = rand::seq::index::sample(&mut self.rng, data.class0.len(), per_class)
                .into_vec();
            let i1 = rand::seq::index::sample(&mut self.rng, data.class1.len(), per_class)
                .into_vec();
            out.push((
                ClassBatch::from_records(&data.class0, &i0),
                ClassBatch::from_records(&data.class1, &i1),
            ));
        }
        Ok(out)
    }

    /// One nominal pass over the training set; returns the mean LossReport.
    pub fn run_epoch(&mut self, data: &TrainSet) -> Result<LossReport> {
        let per_class = self.config.per_class();
        let iterations = (data.min_class_count() / (per_class * 3)).max(1);
        let mut acc = LossReport::default();
        for _ in 0..iterations {
            let b = self.draw_batches(data)?;
            let r = self.training_iteration([(&b[0].0, &b[0].1), (&b[1].0, &b[1].1)], (
                &b[2].0, &b[2].1,
            ))?;
            acc.accumulate(&r);
        }
        acc.scale(1.0 / iterations as f64);
        Ok(acc)
    }

    /// Deterministic validation: class accuracy and phenotype MAE from the
    /// attribute means, plus mean NCC of |FA| maps against |ground truth|
    /// over cross-class pairs (both translation directions).
    pub fn validate(&self, records: &[LoadedRecord]) -> Result<ValMetrics> {
        if records.is_empty() {
            return Err(Error::Contract("validation set is empty".into()));
        }
        let mut correct = 0usize;
        let mut abs_err = 0.0f64;
        let all: Vec<&LoadedRecord> = records.iter().collect();
        for chunk in all.chunks(64) {
            let images = stack_images(chunk);
            let latent = self.model.encode_attr_values(&images)?;
            let preds = self.model.predict_values(&latent.mean)?;
            for (p, rec) in preds.iter().zip(chunk) {
                if u8::from(p.class_logit >= 0.0) == rec.class_label {
                    correct += 1;
                }
                abs_err += (p.regression_value - rec.phenotype).abs();
            }
        }
        let accuracy = correct as f64 / records.len() as f64;
        let mae = abs_err / records.len() as f64;

        let class0: Vec<&LoadedRecord> = records.iter().filter(|r| r.class_label == 0).collect();
        let class1: Vec<&LoadedRecord> = records.iter().filter(|r| r.class_label == 1).collect();
        let n_pairs = class0.len().min(class1.len());
        let mut scores = Vec::new();
        for start in (0..n_pairs).step_by(32) {
            let end = (start + 32).min(n_pairs);
            let xs = &class0[start..end];
            let ys = &class1[start..end];
            let x_imgs = stack_images(xs);
            let y_imgs = stack_images(ys);
            let cx = self.model.encode_content_values(&x_imgs)?;
            let cy = self.model.encode_content_values(&y_imgs)?;
            let ax = self.model.encode_attr_values(&x_imgs)?.mean;
            let ay = self.model.encode_attr_values(&y_imgs)?.mean;
            let v = self.model.generate_values(&cx, &ay)?;
            let mu = self.model.generate_values(&cy, &ax)?;
            for (k, (xr, yr)) in xs.iter().zip(ys).enumerate() {
                let v_img: ndarray::Array2<f32> = v
                    .index_axis(Axis(0), k)
                    .index_axis(Axis(0), 0)
                    .to_owned()
                    .into_dimensionality()
                    .expect("generated image is 2-d");
                let m_x = (&v_img - &xr.image).mapv(f32::abs);
                let gt_x = xr.gt_diff.mapv(f32::abs);
                if let Ok(s) = evalmetrics::ncc(&m_x, &gt_x, &xr.tissue_mask) {
                    scores.push(s);
                }
                let mu_img: ndarray::Array2<f32> = mu
                    .index_axis(Axis(0), k)
                    .index_axis(Axis(0), 0)
                    .to_owned()
                    .into_dimensionality()
                    .expect("generated image is 2-d");
                let m_y = (&mu_img - &yr.image).mapv(f32::abs);
                let gt_y = yr.gt_diff.mapv(f32::abs);
                if let Ok(s) = evalmetrics::ncc(&m_y, &gt_y, &yr.tissue_mask) {
                    scores.push(s);
                }
            }
        }
        let ncc = MeanStd::of(&scores).map(|m| m.mean);
        Ok(ValMetrics { ncc, ncc_n: scores.len(), accuracy, mae })
    }

    /// Save the complete training state (parameters, optimizer moments, RNG).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = IndexMap::new();
        for (name, v) in self.model.params.iter() {
            tensors.insert(name.clone(), v.clone());
        }
        let mut adam_steps = Vec::new();
        for (name, t, m, v) in self.opt.export_slots() {
            adam_steps.push((name.clone(), t));
            tensors.insert(format!("{OPT_M_PREFIX}{name}"), m);
            tensors.insert(format!("{OPT_V_PREFIX}{name}"), v);
        }
        let state = TrainerState {
            train_config: self.config.clone(),
            regression_active: self.regression_active,
            iterations_done: self.iterations_done,
            rejection_fallbacks_total: self.rejection_fallbacks_total,
            rng: self.rng.clone(),
            adam_steps,
        };
        let ck = Checkpoint {
            model_config: self.model.config.clone(),
            trainer: Some(serde_json::to_value(&state)?),
            tensors,
        };
        ck.write(path)
    }

    /// Restore a trainer saved by [`Trainer::save`].
    pub fn load(path: &Path) -> Result<Trainer> {
        let ck = Checkpoint::read(path)?;
        let trainer_json = ck
            .trainer
            .ok_or_else(|| Error::Format("checkpoint carries no trainer state".into()))?;
        let state: TrainerState = serde_json::from_value(trainer_json)?;
        state.train_config.validate()?;

        let mut params = ParamStore::new();
        let mut m_slots: IndexMap<String, ArrayD<f32>> = IndexMap::new();
        let mut v_slots: IndexMap<String, ArrayD<f32>> = IndexMap::new();
        for (name, tensor) in ck.tensors {
            if let Some(stripped) = name.strip_prefix(OPT_M_PREFIX) {
                m_slots.insert(stripped.to_string(), tensor);
            } else if let Some(stripped) = name.strip_prefix(OPT_V_PREFIX) {
                v_slots.insert(stripped.to_string(), tensor);
            } else {
                params.insert(&name, tensor);
            }
        }
        let model = Model::from_store(ck.model_config, params)?;
        let mut opt = Adam::new(
            state.train_config.lr_other,
            state.train_config.adam_beta1,
            state.train_config.adam_beta2,
        )
        .with_lr_override("disc_content.", state.train_config.lr_content_disc);
        for (name, t) in &state.adam_steps {
            let m = m_slots
                .swap_remove(name)
                .ok_or_else(|| Error::Format(format!("missing optimizer moment for {name}")))?;
            let v = v_slots
                .swap_remove(name)
                .ok_or_else(|| Error::Format(format!("missing optimizer moment for {name}")))?;
            opt.import_slot(name, *t, m, v);
        }
        Ok(Trainer {
            model,
            config: state.train_config,
            regression_active: state.regression_active,
            iterations_done: state.iterations_done,
            rejection_fallbacks_total: state.rejection_fallbacks_total,
            opt,
            rng: state.rng,
        })
    }
}

/// Load just the model from a checkpoint, ignoring any trainer state and
/// optimizer moments it carries.
pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let ck = Checkpoint::read(path)?;
    let mut params = ParamStore::new();
    for (name, tensor) in ck.tensors {
        if name.starts_with(OPT_M_PREFIX) || name.starts_with(OPT_V_PREFIX) {
            continue;
        }
        params.insert(&name, tensor);
    }
    Model::from_store(ck.model_config, params)
}

/// Output of [`fit`]: checkpoint paths and the selected validation metrics.
#[derive(Clone, Debug, Serialize)]
pub struct FitOutcome {
    pub classification_best: PathBuf,
    pub classification_last: PathBuf,
    pub regression_best: Option<PathBuf>,
    pub regression_last: Option<PathBuf>,
    pub best_val_ncc: Option<f64>,
    pub best_val_mae: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Classification,
    Regression,
}

impl Phase {
    fn stem(self) -> &'static str {
        match self {
            Phase::Classification => "classification",
            Phase::Regression => "regression",
        }
    }
}

const LOG_HEADER: &str = "epoch,content_adv_disc,content_adv_enc,domain_adv_gen,domain_adv_disc,\
domain_class_gen,domain_class_disc,prediction,kl,fa_map,latent_cycle,reconstruction,total_eg,\
total_d,total_dc,rejection_fallbacks,val_ncc,val_ncc_n,val_accuracy,val_mae\n";

fn log_row(epoch: usize, r: &LossReport, vm: &ValMetrics) -> String {
    let ncc = vm.ncc.map(|v| v.to_string()).unwrap_or_default();
    format!(
        "{epoch},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{ncc},{},{},{}\n",
        r.content_adv_disc,
        r.content_adv_enc,
        r.domain_adv_gen,
        r.domain_adv_disc,
        r.domain_class_gen,
        r.domain_class_disc,
        r.prediction,
        r.kl,
        r.fa_map,
        r.latent_cycle,
        r.reconstruction,
        r.total_eg,
        r.total_d,
        r.total_dc,
        r.rejection_fallbacks,
        vm.ncc_n,
        vm.accuracy,
        vm.mae,
    )
}

/// Run one training phase: epochs of iterations, per-epoch validation and
/// CSV logging, best/last checkpointing. Returns (best, last, best metric).
fn run_phase(
    trainer: &mut Trainer,
    train: &TrainSet,
    val: &[LoadedRecord],
    out_dir: &Path,
    phase: Phase,
) -> Result<(PathBuf, PathBuf, Option<f64>)> {
    let best_path = out_dir.join(format!("{}_best.ckpt", phase.stem()));
    let last_path = out_dir.join(format!("{}_last.ckpt", phase.stem()));
    let log_path = out_dir.join(format!("{}_log.csv", phase.stem()));
    let mut csv = String::from(LOG_HEADER);
    let mut best_metric: Option<f64> = None;
    for epoch in 1..=trainer.config.epochs {
        let report = trainer.run_epoch(train)?;
        let vm = trainer.validate(val)?;
        csv.push_str(&log_row(epoch, &report, &vm));
        std::fs::write(&log_path, &csv)?;
        trainer.save(&last_path)?;
        let improved = match phase {
            // maximize validation NCC; epochs with no valid pairs never win
            Phase::Classification => match (vm.ncc, best_metric) {
                (Some(n), Some(b)) => n > b,
                (Some(_), None) => true,
                (None, _) => false,
            },
            // minimize validation MAE
            Phase::Regression => best_metric.map_or(true, |b| vm.mae < b),
        };
        if improved {
            best_metric = Some(match phase {
                Phase::Classification => vm.ncc.expect("improved implies a score"),
                Phase::Regression => vm.mae,
            });
            trainer.save(&best_path)?;
        }
    }
    if best_metric.is_none() {
        // no epoch produced a usable selection metric; fall back to the last
        std::fs::copy(&last_path, &best_path)?;
    }
    Ok((best_path, last_path, best_metric))
}

/// Full training run: a classification phase selected by validation NCC,
/// then (when enabled) regression fine-tuning from the best classification
/// checkpoint, selected by validation MAE.
pub fn fit(
    data_dir: &Path,
    model_config: ModelConfig,
    train_config: &TrainConfig,
    out_dir: &Path,
) -> Result<FitOutcome> {
    let manifest = DatasetManifest::load(data_dir)?;
    let train = TrainSet::from_records(manifest.load_split(data_dir, Split::Train)?)?;
    let val = manifest.load_split(data_dir, Split::Val)?;
    std::fs::create_dir_all(out_dir)?;

    let mut trainer = Trainer::new(model_config, train_config.clone())?;
    let (class_best, class_last, best_ncc) =
        run_phase(&mut trainer, &train, &val, out_dir, Phase::Classification)?;

    let mut outcome = FitOutcome {
        classification_best: class_best.clone(),
        classification_last: class_last,
        regression_best: None,
        regression_last: None,
        best_val_ncc: best_ncc,
        best_val_mae: None,
    };
    if train_config.regression_enabled {
        let mut finetune = Trainer::load(&class_best)?;
        finetune.begin_regression_phase();
        let (reg_best, reg_last, best_mae) =
            run_phase(&mut finetune, &train, &val, out_dir, Phase::Regression)?;
        outcome.regression_best = Some(reg_best);
        outcome.regression_last = Some(reg_last);
        outcome.best_val_mae = best_mae;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, PhantomConfig};
    use ndarray::Array2;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            image_height: 16,
            image_width: 16,
            attr_channels: 4,
            content_channels: 8,
            widths: [4, 8, 8, 8],
            seed: 1,
            ..Default::default()
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig { batch_size: 4, epochs: 1, seed: 5, ..Default::default() }
    }

    fn tiny_dataset(dir: &Path, n: usize) -> crate::synthdata::DatasetManifest {
        let config = PhantomConfig {
            image_size: 16,
            n_samples: n,
            train_fraction: 0.75,
            val_fraction: 0.125,
            lesion_probability: 0.0,
            ..Default::default()
        };
        generate_dataset(&config, 42, dir).unwrap()
    }

    fn tiny_trainset(dir: &Path, n: usize) -> (TrainSet, Vec<LoadedRecord>) {
        let manifest = tiny_dataset(dir, n);
        let train = TrainSet::from_records(manifest.load_split(dir, Split::Train).unwrap()).unwrap();
        let val = manifest.load_split(dir, Split::Val).unwrap();
        (train, val)
    }

    fn param_snapshot(model: &Model<f32>) -> Vec<(String, ArrayD<f32>)> {
        model.params.iter().map(|(n, v)| (n.clone(), v.clone())).collect()
    }

    fn changed_prefixes(before: &[(String, ArrayD<f32>)], model: &Model<f32>) -> Vec<String> {
        let mut prefixes = std::collections::BTreeSet::new();
        for (name, old) in before {
            let new = model.params.get(name).unwrap();
            if old != new {
                let prefix = name.split('.').next().unwrap().to_string();
                prefixes.insert(prefix);
            }
        }
        prefixes.into_iter().collect()
    }

    #[test]
    fn rejection_sampling_postcondition_and_attempt_counts() {
        // acceptance threshold tuned so a known fraction p of draws pass
        let p = 0.3f64;
        let z_threshold = 0.524400512708041; // P(N(0,1) > z) = 0.3
        let mut rng = stream_rng(50, 0);
        let mut classify = |s: &ArrayD<f64>| Ok(s[[0]] - z_threshold);
        let mut total_attempts = 0usize;
        let runs = 1000;
        for _ in 0..runs {
            let (sample, attempts) =
                rejection_sample_attr(&mut classify, 1, &[1], 1000, &mut rng).unwrap();
            // post-condition: accepted sample classifies to the target class
            assert!(sample[[0]] - z_threshold >= 0.0);
            total_attempts += attempts;
        }
        let mean_attempts = total_attempts as f64 / runs as f64;
        let expected = 1.0 / p;
        assert!(
            (mean_attempts - expected).abs() <= 0.2 * expected,
            "mean attempts {mean_attempts}, expected ≈ {expected}"
        );
    }

    #[test]
    fn rejection_sampling_exhaustion_error() {
        let mut rng = stream_rng(51, 0);
        // classifier constant against the target: always class 0
        let mut classify = |_: &ArrayD<f32>| Ok(-5.0);
        let err = rejection_sample_attr(&mut classify, 1, &[2, 2], 7, &mut rng).unwrap_err();
        match err {
            Error::RejectionExhausted { attempts, best_logit, best_sample } => {
                assert_eq!(attempts, 7);
                assert_eq!(best_logit, -5.0);
                assert_eq!(best_sample.shape(), &[2, 2]);
            }
            other => panic!("expected RejectionExhausted, got {other:?}"),
        }
        // constant toward the target: first draw accepted
        let mut classify = |_: &ArrayD<f32>| Ok(3.0);
        let (_, attempts) = rejection_sample_attr(&mut classify, 1, &[2], 7, &mut rng).unwrap();
        assert_eq!(attempts, 1);
    }

    #[test]
    fn update_order_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_trainset(dir.path(), 16);
        let mut trainer = Trainer::new(tiny_model_config(), tiny_train_config()).unwrap();
        let batches = trainer.draw_batches(&train).unwrap();

        // first content-discriminator update touches only disc_content
        let snap = param_snapshot(&trainer.model);
        trainer.content_disc_update(&batches[0].0, &batches[0].1).unwrap();
        assert_eq!(changed_prefixes(&snap, &trainer.model), ["disc_content"]);

        // second update changes it again (i.e. twice per iteration)
        let snap2 = param_snapshot(&trainer.model);
        trainer.content_disc_update(&batches[1].0, &batches[1].1).unwrap();
        assert_eq!(changed_prefixes(&snap2, &trainer.model), ["disc_content"]);

        // the joint update touches encoders, generator, and domain
        // discriminator exactly once, leaving the content discriminator alone
        let snap3 = param_snapshot(&trainer.model);
        trainer.generator_update(&batches[2].0, &batches[2].1).unwrap();
        assert_eq!(
            changed_prefixes(&snap3, &trainer.model),
            ["disc_domain", "enc_attr", "enc_content", "gen"]
        );
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_trainset(dir.path(), 16);
        let zero = LossWeights {
            content_adv: 0.0,
            domain_adv: 0.0,
            domain_class_gen: 0.0,
            domain_class_disc: 0.0,
            prediction: 0.0,
            kl: 0.0,
            fa_map: 0.0,
            latent_cycle: 0.0,
            reconstruction: 0.0,
        };
        let config = TrainConfig { weights: zero, ..tiny_train_config() };
        let mut trainer = Trainer::new(tiny_model_config(), config).unwrap();
        let snap = param_snapshot(&trainer.model);
        let b = trainer.draw_batches(&train).unwrap();
        trainer
            .training_iteration([(&b[0].0, &b[0].1), (&b[1].0, &b[1].1)], (&b[2].0, &b[2].1))
            .unwrap();
        for (name, old) in &snap {
            let new = trainer.model.params.get(name).unwrap();
            assert_eq!(old, new, "parameter {name} moved under zero weights");
        }
    }

    #[test]
    fn reported_total_matches_weighted_terms() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_trainset(dir.path(), 16);
        let mut trainer = Trainer::new(tiny_model_config(), tiny_train_config()).unwrap();
        let b = trainer.draw_batches(&train).unwrap();
        let r = trainer
            .training_iteration([(&b[0].0, &b[0].1), (&b[1].0, &b[1].1)], (&b[2].0, &b[2].1))
            .unwrap();
        let w = trainer.config.weights;
        let expected_eg = w.content_adv * r.content_adv_enc
            + w.domain_adv * r.domain_adv_gen
            + w.domain_class_gen * r.domain_class_gen
            + w.prediction * r.prediction
            + w.kl * r.kl
            + w.fa_map * r.fa_map
            + w.latent_cycle * r.latent_cycle
            + w.reconstruction * r.reconstruction;
        assert!(
            (r.total_eg - expected_eg).abs() <= 1e-4 * expected_eg.abs().max(1.0),
            "total {} vs recomputed {expected_eg}",
            r.total_eg
        );
        let expected_d = w.domain_adv * r.domain_adv_disc + w.domain_class_disc * r.domain_class_disc;
        assert!((r.total_d - expected_d).abs() <= 1e-4 * expected_d.abs().max(1.0));
        assert!((r.total_dc - w.content_adv * r.content_adv_disc).abs() <= 1e-12);
    }

    #[test]
    fn iterations_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_trainset(dir.path(), 16);
        let run = || {
            let mut trainer = Trainer::new(tiny_model_config(), tiny_train_config()).unwrap();
            let mut reports = Vec::new();
            for _ in 0..2 {
                let b = trainer.draw_batches(&train).unwrap();
                reports.push(
                    trainer
                        .training_iteration(
                            [(&b[0].0, &b[0].1), (&b[1].0, &b[1].1)],
                            (&b[2].0, &b[2].1),
                        )
                        .unwrap(),
                );
            }
            (param_snapshot(&trainer.model), reports)
        };
        let (params_a, reports_a) = run();
        let (params_b, reports_b) = run();
        for ((na, va), (nb, vb)) in params_a.iter().zip(&params_b) {
            assert_eq!(na, nb);
            assert_eq!(
                va.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                vb.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "parameter {na} diverged"
            );
        }
        assert_eq!(reports_a[1].total_eg, reports_b[1].total_eg);
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_trainset(dir.path(), 16);

        // uninterrupted: two iterations
        let mut straight = Trainer::new(tiny_model_config(), tiny_train_config()).unwrap();
        for _ in 0..2 {
            let b = straight.draw_batches(&train).unwrap();
            straight
                .training_iteration([(&b[0].0, &b[0].1), (&b[1].0, &b[1].1)], (&b[2].0, &b[2].1))
                .unwrap();
        }

        // interrupted: one iteration, save, load, one more
        let ckpt = dir.path().join("mid.ckpt");
        let mut first = Trainer::new(tiny_model_config(), tiny_train_config()).unwrap();
        let b = first.draw_batches(&train).unwrap();
        first
            .training_iteration([(&b[0].0, &b[0].1), (&b[1].0, &b[1].1)], (&b[2].0, &b[2].1))
            .unwrap();
        first.save(&ckpt).unwrap();
        let mut resumed = Trainer::load(&ckpt).unwrap();
        assert_eq!(resumed.iterations_done, 1);
        let b = resumed.draw_batches(&train).unwrap();
        resumed
            .training_iteration([(&b[0].0, &b[0].1), (&b[1].0, &b[1].1)], (&b[2].0, &b[2].1))
            .unwrap();

        for (name, v) in straight.model.params.iter() {
            let w = resumed.model.params.get(name).unwrap();
            assert_eq!(
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                w.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                "parameter {name} diverged after resume"
            );
        }
    }

    #[test]
    fn nonfinite_parameters_abort_with_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_trainset(dir.path(), 16);
        let mut trainer = Trainer::new(tiny_model_config(), tiny_train_config()).unwrap();
        trainer.model.params.get_mut("gen.out.b").unwrap()[[0]] = f32::NAN;
        let b = trainer.draw_batches(&train).unwrap();
        let err = trainer
            .training_iteration([(&b[0].0, &b[0].1), (&b[1].0, &b[1].1)], (&b[2].0, &b[2].1))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "got {err:?}");
    }

    #[test]
    fn memorization_training_reduces_loss() {
        // 8 images per class, repeatedly batched: reconstruction-dominated
        // objective must drop substantially once the generator memorizes
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = tiny_trainset(dir.path(), 24);
        let config = TrainConfig { lr_other: 1e-3, lr_content_disc: 4e-4, ..tiny_train_config() };
        let mut trainer = Trainer::new(tiny_model_config(), config).unwrap();
        let mut totals = Vec::new();
        for _ in 0..300 {
            let b = trainer.draw_batches(&train).unwrap();
            let r = trainer
                .training_iteration([(&b[0].0, &b[0].1), (&b[1].0, &b[1].1)], (&b[2].0, &b[2].1))
                .unwrap();
            totals.push(r.total_eg);
        }
        let early: f64 = totals[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = totals[totals.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(
            late <= 0.5 * early,
            "training loss did not halve: early {early:.3}, late {late:.3}"
        );
    }

    #[test]
    fn validate_reports_finite_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let (_, val) = tiny_trainset(dir.path(), 24);
        let trainer = Trainer::new(tiny_model_config(), tiny_train_config()).unwrap();
        let vm = trainer.validate(&val).unwrap();
        assert!((0.0..=1.0).contains(&vm.accuracy));
        assert!(vm.mae.is_finite() && vm.mae >= 0.0);
        if let Some(ncc) = vm.ncc {
            assert!((-1.0..=1.0).contains(&ncc));
        }
    }

    #[test]
    fn fit_smoke_writes_checkpoints_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        std::fs::create_dir_all(&data_dir).unwrap();
        tiny_dataset(&data_dir, 16);
        let out_dir = dir.path().join("run");
        let config = TrainConfig { epochs: 1, ..tiny_train_config() };
        let outcome = fit(&data_dir, tiny_model_config(), &config, &out_dir).unwrap();
        for path in [
            &outcome.classification_best,
            &outcome.classification_last,
            outcome.regression_best.as_ref().unwrap(),
            outcome.regression_last.as_ref().unwrap(),
        ] {
            assert!(path.is_file(), "missing checkpoint {path:?}");
        }
        assert!(outcome.best_val_mae.is_some());
        for stem in ["classification", "regression"] {
            let log = std::fs::read_to_string(out_dir.join(format!("{stem}_log.csv"))).unwrap();
            assert_eq!(log.lines().count(), 2, "{stem} log should have header + 1 epoch");
            assert!(log.starts_with("epoch,"));
        }
        // the regression checkpoint loads back into a usable model
        let restored = Trainer::load(outcome.regression_best.as_ref().unwrap()).unwrap();
        assert!(restored.regression_active);
        let _ = restored;
    }

    #[test]
    fn class_batch_assembly() {
        let rec = |class_label: u8, value: f32, phenotype: f64| LoadedRecord {
            id: 0,
            image: Array2::from_elem((4, 4), value),
            tissue_mask: Array2::from_elem((4, 4), true),
            lesion_mask: Array2::from_elem((4, 4), false),
            gt_diff: Array2::zeros((4, 4)),
            class_label,
            phenotype,
        };
        let records = vec![rec(0, 0.1, 0.2), rec(0, 0.4, 0.3)];
        let batch = ClassBatch::from_records(&records, &[1, 0]);
        assert_eq!(batch.images.shape(), &[2, 1, 4, 4]);
        assert_eq!(batch.images[[0, 0, 0, 0]], 0.4);
        assert_eq!(batch.images[[1, 0, 0, 0]], 0.1);
        assert_eq!(batch.phenotypes, vec![0.3, 0.2]);
    }
}
