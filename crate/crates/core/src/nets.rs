//! The five learnable components of the translation model.
//!
//! * `E^a` — attribute encoder: class-relevant VAE posterior over a small
//!   spatial latent, with linear heads `f_C1` (class logit) and `f_C2`
//!   (phenotype regression) reading the latent sample.
//! * `E^c` — content encoder: class-irrelevant features at quarter
//!   resolution, with an additive Gaussian noise layer during training.
//! * `G` — generator: decodes a (content, attribute) pair back to an image.
//! * `D` — domain discriminator: realness and class logits per image.
//! * `D^c` — content discriminator: class logit from content features alone.
//!
//! All forward passes are *graph builders*: they bind parameters onto a
//! caller-supplied [`Tape`] with a chosen trainability, so one tape can mix
//! trainable encoders with frozen discriminators and vice versa. Noise and
//! reparameterization draws are passed in as arrays, keeping every builder a
//! deterministic function of its inputs.

use crate::autodiff::{ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_f64, stream_rng};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Component name prefixes, in canonical parameter order.
pub const COMPONENT_PREFIXES: [&str; 5] =
    ["enc_attr.", "enc_content.", "gen.", "disc_domain.", "disc_content."];

/// Architecture configuration. `image_height`/`image_width` must be divisible
/// by 16: the attribute latent sits at 1/16 resolution and the content latent
/// at 1/4, preserving the latent-to-input ratio at this scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Attribute latent channels (latent shape `C_a × H/16 × W/16`).
    pub attr_channels: usize,
    /// Content feature channels (shape `C_c × H/4 × W/4`); divisible by 4.
    pub content_channels: usize,
    /// Stage widths shared by the attribute encoder and domain discriminator.
    pub widths: [usize; 4],
    /// Std of the additive Gaussian noise on content features in training.
    pub content_noise_sigma: f64,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            attr_channels: 16,
            content_channels: 64,
            widths: [16, 32, 64, 64],
            content_noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height % 16 != 0 || self.image_width % 16 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by 16",
                self.image_height, self.image_width
            )));
        }
        if self.attr_channels == 0 || self.content_channels == 0 {
            return Err(Error::Config("latent channel counts must be positive".into()));
        }
        if self.content_channels % 4 != 0 {
            return Err(Error::Config("content_channels must be divisible by 4".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.content_noise_sigma < 0.0 {
            return Err(Error::Config("content_noise_sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Attribute latent shape `[C_a, H/16, W/16]`.
    pub fn attr_shape(&self) -> [usize; 3] {
        [self.attr_channels, self.image_height / 16, self.image_width / 16]
    }

    /// Content feature shape `[C_c, H/4, W/4]`.
    pub fn content_shape(&self) -> [usize; 3] {
        [self.content_channels, self.image_height / 4, self.image_width / 4]
    }

    /// Flattened attribute latent dimension (input to the linear heads).
    pub fn attr_dim(&self) -> usize {
        self.attr_shape().iter().product()
    }

    /// Spatial size of the content-discriminator features after its three
    /// stride-2 convolutions (assumes square content features).
    fn content_disc_spatial(&self) -> usize {
        let mut s = self.image_height / 4;
        for _ in 0..3 {
            s = s.div_ceil(2);
        }
        s
    }
}

enum ParamKind {
    Weight,
    Bias,
    Gamma,
}

struct ParamDef {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
}

fn def(name: String, shape: Vec<usize>, kind: ParamKind) -> ParamDef {
    ParamDef { name, shape, kind }
}

/// Conv + instance-norm parameter block.
fn conv_in_defs(defs: &mut Vec<ParamDef>, name: &str, oc: usize, ic: usize, k: usize) {
    defs.push(def(format!("{name}.conv.w"), vec![oc, ic, k, k], ParamKind::Weight));
    defs.push(def(format!("{name}.conv.b"), vec![oc], ParamKind::Bias));
    defs.push(def(format!("{name}.in.gamma"), vec![oc], ParamKind::Gamma));
    defs.push(def(format!("{name}.in.beta"), vec![oc], ParamKind::Bias));
}

fn res_block_defs(defs: &mut Vec<ParamDef>, name: &str, ch: usize) {
    defs.push(def(format!("{name}.conv1.w"), vec![ch, ch, 3, 3], ParamKind::Weight));
    defs.push(def(format!("{name}.conv1.b"), vec![ch], ParamKind::Bias));
    defs.push(def(format!("{name}.in1.gamma"), vec![ch], ParamKind::Gamma));
    defs.push(def(format!("{name}.in1.beta"), vec![ch], ParamKind::Bias));
    defs.push(def(format!("{name}.conv2.w"), vec![ch, ch, 3, 3], ParamKind::Weight));
    defs.push(def(format!("{name}.conv2.b"), vec![ch], ParamKind::Bias));
    defs.push(def(format!("{name}.in2.gamma"), vec![ch], ParamKind::Gamma));
    defs.push(def(format!("{name}.in2.beta"), vec![ch], ParamKind::Bias));
}

/// The full parameter schema for a configuration, in canonical order.
fn param_defs(cfg: &ModelConfig) -> Vec<ParamDef> {
    let mut defs = Vec::new();
    let ca = cfg.attr_channels;
    let cc = cfg.content_channels;

    // attribute encoder: 4 down-residual blocks (no normalisation — the
    // attribute path must keep the intensity information normalisation
    // would strip), two 1x1 heads, two linear heads
    let mut ic = 1;
    for (i, &w) in cfg.widths.iter().enumerate() {
        defs.push(def(format!("enc_attr.down{i}.conv.w"), vec![w, ic, 3, 3], ParamKind::Weight));
        defs.push(def(format!("enc_attr.down{i}.conv.b"), vec![w], ParamKind::Bias));
        defs.push(def(format!("enc_attr.down{i}.skip.w"), vec![w, ic, 1, 1], ParamKind::Weight));
        defs.push(def(format!("enc_attr.down{i}.skip.b"), vec![w], ParamKind::Bias));
        ic = w;
    }
    let top = cfg.widths[3];
    for head in ["mean", "logvar"] {
        defs.push(def(format!("enc_attr.{head}.w"), vec![ca, top, 1, 1], ParamKind::Weight));
        defs.push(def(format!("enc_attr.{head}.b"), vec![ca], ParamKind::Bias));
    }
    for head in ["fc1", "fc2"] {
        defs.push(def(format!("enc_attr.{head}.w"), vec![cfg.attr_dim(), 1], ParamKind::Weight));
        defs.push(def(format!("enc_attr.{head}.b"), vec![1], ParamKind::Bias));
    }

    // content encoder: 2 stride-2 down blocks, 4 basic residual blocks
    conv_in_defs(&mut defs, "enc_content.down0", cc / 2, 1, 3);
    conv_in_defs(&mut defs, "enc_content.down1", cc, cc / 2, 3);
    for i in 0..4 {
        res_block_defs(&mut defs, &format!("enc_content.res{i}"), cc);
    }

    // generator: merge, residual blocks, two deconv blocks, output conv
    conv_in_defs(&mut defs, "gen.merge", cc, cc + ca, 1);
    for i in 0..3 {
        res_block_defs(&mut defs, &format!("gen.res{i}"), cc);
    }
    for (i, (in_ch, out_ch)) in [(cc, cc / 2), (cc / 2, cc / 4)].into_iter().enumerate() {
        let name = format!("gen.up{}", i + 1);
        defs.push(def(format!("{name}.w"), vec![in_ch, out_ch, 4, 4], ParamKind::Weight));
        defs.push(def(format!("{name}.b"), vec![out_ch], ParamKind::Bias));
        defs.push(def(format!("{name}.ln.gamma"), vec![out_ch], ParamKind::Gamma));
        defs.push(def(format!("{name}.ln.beta"), vec![out_ch], ParamKind::Bias));
    }
    defs.push(def("gen.out.w".into(), vec![1, cc / 4, 3, 3], ParamKind::Weight));
    defs.push(def("gen.out.b".into(), vec![1], ParamKind::Bias));

    // domain discriminator: 4 stride-2 convs, a 1x1 mid layer, two 1x1 heads
    let mut ic = 1;
    for (i, &w) in cfg.widths.iter().enumerate() {
        defs.push(def(format!("disc_domain.conv{i}.w"), vec![w, ic, 3, 3], ParamKind::Weight));
        defs.push(def(format!("disc_domain.conv{i}.b"), vec![w], ParamKind::Bias));
        ic = w;
    }
    defs.push(def("disc_domain.mid.w".into(), vec![top, top, 1, 1], ParamKind::Weight));
    defs.push(def("disc_domain.mid.b".into(), vec![top], ParamKind::Bias));
    for head in ["real", "class"] {
        defs.push(def(format!("disc_domain.{head}.w"), vec![1, top, 1, 1], ParamKind::Weight));
        defs.push(def(format!("disc_domain.{head}.b"), vec![1], ParamKind::Bias));
    }

    // content discriminator: 3 stride-2 convs, a spatial-collapse conv, a
    // final linear layer
    for i in 0..3 {
        defs.push(def(format!("disc_content.conv{i}.w"), vec![cc, cc, 3, 3], ParamKind::Weight));
        defs.push(def(format!("disc_content.conv{i}.b"), vec![cc], ParamKind::Bias));
    }
    if cfg.content_disc_spatial() >= 2 {
        defs.push(def("disc_content.conv3.w".into(), vec![cc, cc, 2, 2], ParamKind::Weight));
        defs.push(def("disc_content.conv3.b".into(), vec![cc], ParamKind::Bias));
    }
    defs.push(def("disc_content.fc.w".into(), vec![cc, 1], ParamKind::Weight));
    defs.push(def("disc_content.fc.b".into(), vec![1], ParamKind::Bias));

    defs
}

/// Attribute posterior on a tape.
#[derive(Clone, Copy)]
pub struct AttrLatentVars {
    pub mean: Var,
    pub log_var: Var,
    pub sample: Var,
}

/// Prediction heads on a tape (`[N,1]` each).
#[derive(Clone, Copy)]
pub struct PredictionVars {
    pub class_logit: Var,
    pub regression: Var,
}

/// Per-item prediction values.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub class_logit: f64,
    pub regression_value: f64,
}

/// Per-item domain discriminator values.
#[derive(Clone, Copy, Debug)]
pub struct DomainJudgement {
    pub realness_logit: f64,
    pub class_logit: f64,
}

/// Attribute posterior as arrays (value-level, for attribution and eval).
#[derive(Clone, Debug)]
pub struct AttrLatent<F: Scalar> {
    pub mean: ArrayD<F>,
    pub log_var: ArrayD<F>,
    pub sample: ArrayD<F>,
}

/// The complete model: configuration plus one named parameter store.
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

/// Small helper carrying (tape, store, trainability) through a component.
struct B<'t, 'm, F: Scalar> {
    tape: &'t mut Tape<F>,
    store: &'m ParamStore<F>,
    trainable: bool,
}

impl<F: Scalar> B<'_, '_, F> {
    fn p(&mut self, name: &str) -> Var {
        self.tape.param(self.store, name, self.trainable)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.tape.conv2d(x, w, stride, pad);
        self.tape.add_bias(y, b)
    }

    fn conv_t(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.tape.conv_transpose2d(x, w, stride, pad);
        self.tape.add_bias(y, b)
    }

    fn linear(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add_bias(y, b)
    }

    fn instance_norm(&mut self, name: &str, x: Var) -> Var {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let y = self.tape.instance_norm(x);
        let y = self.tape.mul_bias(y, gamma);
        self.tape.add_bias(y, beta)
    }

    fn layer_norm(&mut self, name: &str, x: Var) -> Var {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let y = self.tape.layer_norm(x);
        let y = self.tape.mul_bias(y, gamma);
        self.tape.add_bias(y, beta)
    }

    fn res_block(&mut self, name: &str, x: Var) -> Var {
        let f = self.conv(&format!("{name}.conv1"), x, 1, 1);
        let f = self.instance_norm(&format!("{name}.in1"), f);
        let f = self.tape.relu(f);
        let f = self.conv(&format!("{name}.conv2"), f, 1, 1);
        let f = self.instance_norm(&format!("{name}.in2"), f);
        let s = self.tape.add(x, f);
        self.tape.relu(s)
    }
}

impl<F: Scalar> Model<F> {
    /// Initialize fresh parameters: convolution and linear weights from
    /// N(0, 0.02²), biases and norm shifts at zero, norm gains at one.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 1);
        let mut params = ParamStore::new();
        for d in param_defs(&config) {
            let value = match d.kind {
                ParamKind::Weight => {
                    // The attribute encoder has no normalisation layers, so
                    // its weights are fan-in scaled to keep activations O(1)
                    // through the stack; the normalised components use the
                    // usual GAN convention of a fixed small std.
                    let std = if d.name.starts_with("enc_attr.") {
                        let fan_in: usize = if d.shape.len() == 4 {
                            d.shape[1..].iter().product()
                        } else {
                            d.shape[0]
                        };
                        (2.0 / fan_in as f64).sqrt()
                    } else {
                        0.02
                    };
                    ArrayD::from_shape_simple_fn(IxDyn(&d.shape), || {
                        F::from_f64(normal_f64(&mut rng) * std)
                    })
                }
                ParamKind::Bias => ArrayD::zeros(IxDyn(&d.shape)),
                ParamKind::Gamma => ArrayD::from_elem(IxDyn(&d.shape), F::one()),
            };
            params.insert(&d.name, value);
        }
        Ok(Model { config, params })
    }

    /// Rebuild a model around an existing parameter store (checkpoint load),
    /// validating that the store matches the configuration's schema exactly.
    pub fn from_store(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let defs = param_defs(&config);
        if defs.len() != params.len() {
            return Err(Error::Format(format!(
                "parameter store has {} tensors, config expects {}",
                params.len(),
                defs.len()
            )));
        }
        for d in &defs {
            match params.get(&d.name) {
                None => return Err(Error::Format(format!("missing parameter {}", d.name))),
                Some(v) if v.shape() != d.shape.as_slice() => {
                    return Err(Error::Format(format!(
                        "parameter {} has shape {:?}, config expects {:?}",
                        d.name,
                        v.shape(),
                        d.shape
                    )));
                }
                _ => {}
            }
        }
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count()
    }

    /// Element counts per component, in canonical prefix order.
    pub fn component_param_counts(&self) -> Vec<(&'static str, usize)> {
        COMPONENT_PREFIXES
            .iter()
            .map(|&prefix| {
                let count = self
                    .params
                    .iter()
                    .filter(|(n, _)| n.starts_with(prefix))
                    .map(|(_, v)| v.len())
                    .sum();
                (prefix, count)
            })
            .collect()
    }

    fn expect_image(&self, v: &ArrayD<F>) -> Result<()> {
        let want = [self.config.image_height, self.config.image_width];
        if v.ndim() != 4 || v.shape()[1] != 1 || v.shape()[2] != want[0] || v.shape()[3] != want[1]
        {
            return Err(Error::Contract(format!(
                "expected image batch [N,1,{},{}], got {:?}",
                want[0],
                want[1],
                v.shape()
            )));
        }
        Ok(())
    }

    fn expect_shape(&self, v: &ArrayD<F>, tail: &[usize; 3], what: &str) -> Result<()> {
        if v.ndim() != 4 || v.shape()[1..] != tail[..] {
            return Err(Error::Contract(format!(
                "expected {what} batch [N,{},{},{}], got {:?}",
                tail[0],
                tail[1],
                tail[2],
                v.shape()
            )));
        }
        Ok(())
    }

    // ---- graph builders ----

    /// Attribute encoder `E^a`: returns the posterior mean and log-variance
    /// (`[N, C_a, H/16, W/16]`).
    pub fn encode_attr(&self, tape: &mut Tape<F>, x: Var, trainable: bool) -> Result<(Var, Var)> {
        let (mean, log_var, _trunk) = self.encode_attr_probed(tape, x, trainable)?;
        Ok((mean, log_var))
    }

    /// [`Model::encode_attr`] with the last convolutional block's output
    /// exposed as a third variable (`[N, widths[3], H/16, W/16]`), the
    /// Grad-CAM target layer.
    pub fn encode_attr_probed(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        trainable: bool,
    ) -> Result<(Var, Var, Var)> {
        self.expect_image(tape.value(x))?;
        let mut b = B { tape, store: &self.params, trainable };
        let mut h = x;
        for i in 0..4 {
            let name = format!("enc_attr.down{i}");
            let main = b.conv(&format!("{name}.conv"), h, 1, 1);
            let main = b.tape.leaky_relu(main, 0.2);
            let main = b.tape.avg_pool2d(main, 2);
            let skip = b.tape.avg_pool2d(h, 2);
            let skip = b.conv(&format!("{name}.skip"), skip, 1, 0);
            h = b.tape.add(main, skip);
        }
        let mean = b.conv("enc_attr.mean", h, 1, 0);
        let log_var = b.conv("enc_attr.logvar", h, 1, 0);
        Ok((mean, log_var, h))
    }

    /// Reparameterized sample: `mean + exp(0.5·log_var) ⊙ eps`, or the mean
    /// itself in deterministic mode (`eps = None`).
    pub fn attr_sample(
        &self,
        tape: &mut Tape<F>,
        mean: Var,
        log_var: Var,
        eps: Option<&ArrayD<F>>,
    ) -> AttrLatentVars {
        let sample = match eps {
            None => mean,
            Some(eps) => {
                assert_eq!(eps.shape(), tape.value(mean).shape(), "eps shape mismatch");
                let e = tape.constant(eps.clone());
                let half = tape.scale(log_var, F::from_f64(0.5));
                let std = tape.exp(half);
                let noise = tape.mul(std, e);
                tape.add(mean, noise)
            }
        };
        AttrLatentVars { mean, log_var, sample }
    }

    /// Linear heads `f_C1`/`f_C2` on an attribute sample (`[N,1]` each).
    pub fn predict(
        &self,
        tape: &mut Tape<F>,
        sample: Var,
        trainable: bool,
    ) -> Result<PredictionVars> {
        self.expect_shape(tape.value(sample), &self.config.attr_shape(), "attribute latent")?;
        let n = tape.value(sample).shape()[0];
        let d = self.config.attr_dim();
        let mut b = B { tape, store: &self.params, trainable };
        let flat = b.tape.reshape(sample, &[n, d]);
        let class_logit = b.linear("enc_attr.fc1", flat);
        let regression = b.linear("enc_attr.fc2", flat);
        Ok(PredictionVars { class_logit, regression })
    }

    /// Content encoder `E^c` (`[N, C_c, H/4, W/4]`). `noise`, when given, is
    /// added to the features (training mode).
    pub fn encode_content(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        noise: Option<&ArrayD<F>>,
        trainable: bool,
    ) -> Result<Var> {
        self.expect_image(tape.value(x))?;
        let mut b = B { tape, store: &self.params, trainable };
        let mut h = x;
        for i in 0..2 {
            let name = format!("enc_content.down{i}");
            h = b.conv(&format!("{name}.conv"), h, 2, 1);
            h = b.instance_norm(&format!("{name}.in"), h);
            h = b.tape.relu(h);
        }
        for i in 0..4 {
            h = b.res_block(&format!("enc_content.res{i}"), h);
        }
        if let Some(noise) = noise {
            assert_eq!(noise.shape(), tape.value(h).shape(), "content noise shape mismatch");
            let nc = tape.constant(noise.clone());
            h = tape.add(h, nc);
        }
        Ok(h)
    }

    /// Generator `G`: decode a (content, attribute-sample) pair to an image
    /// in `[0,1]`.
    pub fn generate(
        &self,
        tape: &mut Tape<F>,
        content: Var,
        attr_sample: Var,
        trainable: bool,
    ) -> Result<Var> {
        self.expect_shape(tape.value(content), &self.config.content_shape(), "content")?;
        self.expect_shape(tape.value(attr_sample), &self.config.attr_shape(), "attribute latent")?;
        let mut b = B { tape, store: &self.params, trainable };
        let up = b.tape.upsample_nearest(attr_sample, 4);
        let cat = b.tape.concat_channels(content, up);
        let mut h = b.conv("gen.merge.conv", cat, 1, 0);
        h = b.instance_norm("gen.merge.in", h);
        h = b.tape.relu(h);
        for i in 0..3 {
            h = b.res_block(&format!("gen.res{i}"), h);
        }
        for i in 1..=2 {
            let name = format!("gen.up{i}");
            h = b.conv_t(&name, h, 2, 1);
            h = b.tape.smooth_pool2x2(h);
            h = b.layer_norm(&format!("{name}.ln"), h);
            h = b.tape.relu(h);
        }
        let o = b.conv("gen.out", h, 1, 1);
        Ok(b.tape.sigmoid(o))
    }

    /// Domain discriminator `D`: (realness logit, class logit), `[N,1]` each.
    pub fn discriminate_domain(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        trainable: bool,
    ) -> Result<(Var, Var)> {
        self.expect_image(tape.value(x))?;
        let mut b = B { tape, store: &self.params, trainable };
        let mut h = x;
        for i in 0..4 {
            h = b.conv(&format!("disc_domain.conv{i}"), h, 2, 1);
            h = b.tape.leaky_relu(h, 0.2);
        }
        h = b.conv("disc_domain.mid", h, 1, 0);
        h = b.tape.leaky_relu(h, 0.2);
        let real_map = b.conv("disc_domain.real", h, 1, 0);
        let realness = b.tape.spatial_mean(real_map);
        let class_map = b.conv("disc_domain.class", h, 1, 0);
        let class = b.tape.spatial_mean(class_map);
        Ok((realness, class))
    }

    /// Content discriminator `D^c`: class logit `[N,1]` from content features.
    pub fn discriminate_content(
        &self,
        tape: &mut Tape<F>,
        content: Var,
        trainable: bool,
    ) -> Result<Var> {
        self.expect_shape(tape.value(content), &self.config.content_shape(), "content")?;
        let mut b = B { tape, store: &self.params, trainable };
        let mut h = content;
        for i in 0..3 {
            h = b.conv(&format!("disc_content.conv{i}"), h, 2, 1);
            h = b.tape.leaky_relu(h, 0.2);
        }
        if self.config.content_disc_spatial() >= 2 {
            h = b.conv("disc_content.conv3", h, 1, 0);
            h = b.tape.leaky_relu(h, 0.2);
        }
        let pooled = b.tape.spatial_mean(h);
        Ok(b.linear("disc_content.fc", pooled))
    }

    // ---- value-level wrappers (inference) ----

    /// Deterministic attribute posterior for a batch of images.
    pub fn encode_attr_values(&self, images: &ArrayD<F>) -> Result<AttrLatent<F>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let (mean, log_var) = self.encode_attr(&mut tape, x, false)?;
        Ok(AttrLatent {
            mean: tape.value(mean).clone(),
            log_var: tape.value(log_var).clone(),
            sample: tape.value(mean).clone(),
        })
    }

    /// Predictions for a batch of attribute samples.
    pub fn predict_values(&self, samples: &ArrayD<F>) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let s = tape.constant(samples.clone());
        let pred = self.predict(&mut tape, s, false)?;
        let logits = tape.value(pred.class_logit);
        let regs = tape.value(pred.regression);
        Ok(logits
            .iter()
            .zip(regs.iter())
            .map(|(&c, &r)| Prediction { class_logit: c.as_f64(), regression_value: r.as_f64() })
            .collect())
    }

    /// Deterministic content features for a batch of images.
    pub fn encode_content_values(&self, images: &ArrayD<F>) -> Result<ArrayD<F>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let c = self.encode_content(&mut tape, x, None, false)?;
        Ok(tape.value(c).clone())
    }

    /// Decode (content, attribute-sample) values to images.
    pub fn generate_values(&self, content: &ArrayD<F>, attr: &ArrayD<F>) -> Result<ArrayD<F>> {
        let mut tape = Tape::new();
        let c = tape.constant(content.clone());
        let a = tape.constant(attr.clone());
        let img = self.generate(&mut tape, c, a, false)?;
        Ok(tape.value(img).clone())
    }

    /// Domain judgements for a batch of images.
    pub fn discriminate_domain_values(&self, images: &ArrayD<F>) -> Result<Vec<DomainJudgement>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let (real, class) = self.discriminate_domain(&mut tape, x, false)?;
        let r = tape.value(real);
        let c = tape.value(class);
        Ok(r.iter()
            .zip(c.iter())
            .map(|(&r, &c)| DomainJudgement {
                realness_logit: r.as_f64(),
                class_logit: c.as_f64(),
            })
            .collect())
    }
}

/// Value-level reparameterization used outside tapes.
pub fn sample_attr_value<F: Scalar>(
    mean: &ArrayD<F>,
    log_var: &ArrayD<F>,
    eps: &ArrayD<F>,
) -> ArrayD<F> {
    let mut out = mean.clone();
    ndarray::Zip::from(&mut out).and(log_var).and(eps).for_each(|o, &lv, &e| {
        *o = *o + (lv * F::from_f64(0.5)).exp() * e;
    });
    out
}
