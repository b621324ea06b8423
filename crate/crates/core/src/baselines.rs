//! Reference attribution methods — occlusion, integrated gradients,
//! Grad-CAM, and plain gradient saliency — applied to an independently
//! trained classifier with the attribute encoder's architecture.
//!
//! The map functions are generic over an [`ImageScorer`] so they can be
//! verified against closed-form linear models; [`BaselineCNN`] provides the
//! trained-network scorer (its class-1 logit).

use crate::attribution::{from_batch, to_batch};
use crate::autodiff::{SgdMomentum, Tape};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nets::{Model, ModelConfig};
use crate::rng::stream_rng;
use crate::synthdata::LoadedRecord;
use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

const RNG_STREAM_BASELINE: u64 = 300;
/// Paper recipe: occlusion blocks of value 0, size 10, stride 5.
pub const DEFAULT_OCCLUSION_BLOCK: usize = 10;
pub const DEFAULT_OCCLUSION_STRIDE: usize = 5;
pub const DEFAULT_OCCLUSION_VALUE: f32 = 0.0;
/// Paper recipe: integrated gradients from a zero baseline in 200 steps.
pub const DEFAULT_IG_STEPS: usize = 200;

/// A scalar scoring function over image batches, with input gradients.
/// Batches are `[n, 1, H, W]`; one score per item.
pub trait ImageScorer {
    fn score_batch(&self, images: &ArrayD<f32>) -> Result<Vec<f64>>;
    /// Scores and `∂score_i/∂images_i` (same shape as `images`).
    fn grad_batch(&self, images: &ArrayD<f32>) -> Result<(Vec<f64>, ArrayD<f32>)>;

    fn score(&self, image: &Array2<f32>) -> Result<f64> {
        Ok(self.score_batch(&to_batch(&[image]))?[0])
    }
}

/// Standalone classifier sharing the attribute encoder's architecture: the
/// `E^a` trunk, with the class head applied to the posterior mean. Trained
/// from scratch with SGD + momentum on a weighted BCE.
pub struct BaselineCNN {
    pub model: Model<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineTrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        BaselineTrainConfig { lr: 1e-4, momentum: 0.9, epochs: 50, batch_size: 16, seed: 0 }
    }
}

impl BaselineTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("baseline lr must be positive and finite".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {}", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

impl BaselineCNN {
    /// Class-1 probability for the flip test.
    pub fn class_probability(&self, image: &Array2<f32>) -> Result<f64> {
        let logit = self.score(image)?;
        Ok(1.0 / (1.0 + (-logit).exp()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = IndexMap::new();
        for (name, v) in self.model.params.iter() {
            tensors.insert(name.clone(), v.clone());
        }
        let ck = Checkpoint {
            model_config: self.model.config.clone(),
            trainer: Some(serde_json::json!({"kind": "baseline"})),
            tensors,
        };
        ck.write(path)
    }

    pub fn load(path: &Path) -> Result<BaselineCNN> {
        let ck = Checkpoint::read(path)?;
        let mut params = crate::autodiff::ParamStore::new();
        for (name, tensor) in ck.tensors {
            params.insert(&name, tensor);
        }
        Ok(BaselineCNN { model: Model::from_store(ck.model_config, params)? })
    }
}

impl ImageScorer for BaselineCNN {
    fn score_batch(&self, images: &ArrayD<f32>) -> Result<Vec<f64>> {
        let latent = self.model.encode_attr_values(images)?;
        Ok(self.model.predict_values(&latent.mean)?.iter().map(|p| p.class_logit).collect())
    }

    fn grad_batch(&self, images: &ArrayD<f32>) -> Result<(Vec<f64>, ArrayD<f32>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let (mean, _log_var) = self.model.encode_attr(&mut tape, x, false)?;
        let pred = self.model.predict(&mut tape, mean, false)?;
        let scores: Vec<f64> =
            tape.value(pred.class_logit).iter().map(|&v| v as f64).collect();
        // the items are independent, so the gradient of the summed logits
        // recovers each item's own input gradient
        let total = tape.sum_all(pred.class_logit);
        tape.backward(total);
        let grad = tape.grad(x).expect("leaf gradient").clone();
        Ok((scores, grad))
    }
}

/// Train the baseline classifier. Class imbalance is handled by weighting
/// each item's BCE term with `n / (2 · n_class)`.
pub fn train_baseline(
    records: &[LoadedRecord],
    model_config: ModelConfig,
    config: &BaselineTrainConfig,
) -> Result<BaselineCNN> {
    config.validate()?;
    let n = records.len();
    let n1 = records.iter().filter(|r| r.class_label == 1).count();
    let n0 = n - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Config(format!(
            "baseline training needs both classes, got {n0} of class 0 and {n1} of class 1"
        )));
    }
    let class_weights = [n as f64 / (2.0 * n0 as f64), n as f64 / (2.0 * n1 as f64)];

    let mut model = Model::init(model_config)?;
    let mut opt = SgdMomentum::new(config.lr, config.momentum);
    let mut rng = stream_rng(config.seed, RNG_STREAM_BASELINE);
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<&Array2<f32>> = chunk.iter().map(|&i| &records[i].image).collect();
            let batch = to_batch(&images);
            let m = chunk.len();
            let mut targets = ArrayD::<f32>::zeros(IxDyn(&[m, 1]));
            let mut weights = ArrayD::<f32>::zeros(IxDyn(&[m, 1]));
            for (k, &i) in chunk.iter().enumerate() {
                let class = records[i].class_label;
                targets[[k, 0]] = f32::from(class);
                weights[[k, 0]] = class_weights[usize::from(class)] as f32;
            }

            let grads = {
                let mut tape = Tape::new();
                let x = tape.constant(batch);
                let t = tape.constant(targets);
                let w = tape.constant(weights);
                let (mean, _log_var) = model.encode_attr(&mut tape, x, true)?;
                let pred = model.predict(&mut tape, mean, true)?;
                let loss = tape.bce_with_logits_mean(pred.class_logit, t, Some(w));
                tape.ensure_finite(loss, "baseline classifier objective")?;
                tape.backward(loss);
                tape.param_grads()
            };
            opt.step(&mut model.params, &grads);
        }
    }
    Ok(BaselineCNN { model })
}

fn expect_pair_shape(a: &Array2<f32>, b: &Array2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "images disagree in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Occlusion attribution: slide a `block`×`block` patch of `baseline_value`
/// over the image on a `stride` grid; each pixel receives the average of
/// `f(original) − f(occluded)` over the placements covering it. Pixels no
/// placement reaches (possible at the far edges) stay 0.
pub fn occlusion_map<S: ImageScorer>(
    scorer: &S,
    image: &Array2<f32>,
    block: usize,
    stride: usize,
    baseline_value: f32,
) -> Result<Array2<f32>> {
    let (h, w) = image.dim();
    if block == 0 || stride == 0 {
        return Err(Error::Contract("block and stride must be ≥ 1".into()));
    }
    if block > h || block > w {
        return Err(Error::Contract(format!(
            "occlusion block {block} exceeds the {h}×{w} image"
        )));
    }
    let f_orig = scorer.score(image)?;
    let rows: Vec<usize> = (0..=(h - block)).step_by(stride).collect();
    let cols: Vec<usize> = (0..=(w - block)).step_by(stride).collect();
    let positions: Vec<(usize, usize)> =
        rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).collect();

    let mut sum = Array2::<f64>::zeros((h, w));
    let mut count = Array2::<u32>::zeros((h, w));
    for chunk in positions.chunks(64) {
        let mut batch = ArrayD::<f32>::zeros(IxDyn(&[chunk.len(), 1, h, w]));
        for (k, &(i, j)) in chunk.iter().enumerate() {
            let mut occluded = image.clone();
            occluded
                .slice_mut(ndarray::s![i..i + block, j..j + block])
                .fill(baseline_value);
            batch
                .index_axis_mut(Axis(0), k)
                .index_axis_mut(Axis(0), 0)
                .assign(&occluded);
        }
        let scores = scorer.score_batch(&batch)?;
        for (&(i, j), f_occ) in chunk.iter().zip(scores) {
            let diff = f_orig - f_occ;
            for p in i..i + block {
                for q in j..j + block {
                    sum[[p, q]] += diff;
                    count[[p, q]] += 1;
                }
            }
        }
    }
    Ok(Array2::from_shape_fn((h, w), |(p, q)| {
        if count[[p, q]] == 0 { 0.0 } else { (sum[[p, q]] / count[[p, q]] as f64) as f32 }
    }))
}

/// Integrated gradients with a right-endpoint Riemann sum:
/// `(x − x₀) ⊙ (1/steps) Σ_{k=1..steps} ∇f(x₀ + (k/steps)(x − x₀))`.
pub fn integrated_gradients_map<S: ImageScorer>(
    scorer: &S,
    image: &Array2<f32>,
    baseline_image: &Array2<f32>,
    steps: usize,
) -> Result<Array2<f32>> {
    expect_pair_shape(image, baseline_image)?;
    if steps == 0 {
        return Err(Error::Contract("integrated gradients need at least 1 step".into()));
    }
    let (h, w) = image.dim();
    let mut grad_sum = Array2::<f64>::zeros((h, w));
    for chunk_start in (1..=steps).step_by(64) {
        let ks: Vec<usize> = (chunk_start..=(chunk_start + 63).min(steps)).collect();
        let mut batch = ArrayD::<f32>::zeros(IxDyn(&[ks.len(), 1, h, w]));
        for (row, &k) in ks.iter().enumerate() {
            let alpha = k as f32 / steps as f32;
            let interp = image - baseline_image;
            let interp = baseline_image + &interp.mapv(|d| alpha * d);
            batch.index_axis_mut(Axis(0), row).index_axis_mut(Axis(0), 0).assign(&interp);
        }
        let (_scores, grads) = scorer.grad_batch(&batch)?;
        for row in 0..ks.len() {
            let g = grads.index_axis(Axis(0), row);
            let g = g.index_axis(Axis(0), 0);
            ndarray::Zip::indexed(&mut grad_sum)
                .for_each(|(p, q), acc| *acc += g[[p, q]] as f64);
        }
    }
    Ok(Array2::from_shape_fn((h, w), |(p, q)| {
        let avg = grad_sum[[p, q]] / steps as f64;
        ((image[[p, q]] - baseline_image[[p, q]]) as f64 * avg) as f32
    }))
}

/// Absolute input gradient `|∂f/∂x|`.
pub fn gradient_saliency_map<S: ImageScorer>(
    scorer: &S,
    image: &Array2<f32>,
) -> Result<Array2<f32>> {
    let (_scores, grads) = scorer.grad_batch(&to_batch(&[image]))?;
    Ok(from_batch(&grads, 0).mapv(f32::abs))
}

/// The Grad-CAM target tensors for one image: the last convolutional
/// block's activations `A` and the class logit's gradient `∂f/∂A`,
/// both `[C, h', w']`.
pub fn gradcam_tensors(
    cnn: &BaselineCNN,
    image: &Array2<f32>,
) -> Result<(ArrayD<f32>, ArrayD<f32>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(to_batch(&[image]));
    let (mean, _log_var, trunk) = cnn.model.encode_attr_probed(&mut tape, x, false)?;
    let pred = cnn.model.predict(&mut tape, mean, false)?;
    let total = tape.sum_all(pred.class_logit);
    tape.backward(total);
    let activations = tape.value(trunk).index_axis(Axis(0), 0).to_owned();
    let grads = tape
        .grad(trunk)
        .ok_or_else(|| Error::Contract("target layer received no gradient".into()))?
        .index_axis(Axis(0), 0)
        .to_owned();
    Ok((activations, grads))
}

/// Combine captured tensors the Grad-CAM way: weight each channel by its
/// spatial-mean gradient, sum over channels, clamp at zero.
pub fn combine_gradcam(activations: &ArrayD<f32>, grads: &ArrayD<f32>) -> Result<Array2<f32>> {
    if activations.ndim() != 3 || activations.shape() != grads.shape() {
        return Err(Error::Contract(format!(
            "gradcam tensors must share a [C,h,w] shape, got {:?} vs {:?}",
            activations.shape(),
            grads.shape()
        )));
    }
    let (c, h, w) = (activations.shape()[0], activations.shape()[1], activations.shape()[2]);
    let mut map = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        let a = activations.index_axis(Axis(0), ch);
        let g = grads.index_axis(Axis(0), ch);
        let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
        for p in 0..h {
            for q in 0..w {
                map[[p, q]] += alpha * a[[p, q]] as f64;
            }
        }
    }
    Ok(map.mapv(|v| v.max(0.0) as f32))
}

fn upsample_nearest_2d(low: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (lh, lw) = low.dim();
    assert!(h % lh == 0 && w % lw == 0, "upsample target must be an integer multiple");
    let (fh, fw) = (h / lh, w / lw);
    Array2::from_shape_fn((h, w), |(p, q)| low[[p / fh, q / fw]])
}

/// Grad-CAM on the attribute trunk's last convolutional block, upsampled
/// (nearest-neighbour) to the input size.
pub fn gradcam_map(cnn: &BaselineCNN, image: &Array2<f32>) -> Result<Array2<f32>> {
    let (activations, grads) = gradcam_tensors(cnn, image)?;
    let low = combine_gradcam(&activations, &grads)?;
    let (h, w) = image.dim();
    Ok(upsample_nearest_2d(&low, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::rng::normal_f64;
    use crate::synthdata::{generate_dataset, PhantomConfig, Split};
    use ndarray::Array4;

    /// `f(x) = Σ w ⊙ x` — every map has a closed form.
    struct LinearScorer {
        w: Array2<f32>,
    }

    impl ImageScorer for LinearScorer {
        fn score_batch(&self, images: &ArrayD<f32>) -> Result<Vec<f64>> {
            let n = images.shape()[0];
            Ok((0..n)
                .map(|k| {
                    images
                        .index_axis(Axis(0), k)
                        .iter()
                        .zip(self.w.iter())
                        .map(|(&x, &w)| x as f64 * w as f64)
                        .sum()
                })
                .collect())
        }

        fn grad_batch(&self, images: &ArrayD<f32>) -> Result<(Vec<f64>, ArrayD<f32>)> {
            let scores = self.score_batch(images)?;
            let n = images.shape()[0];
            let (h, w) = self.w.dim();
            let mut grads = Array4::<f32>::zeros((n, 1, h, w));
            for k in 0..n {
                grads.slice_mut(ndarray::s![k, 0, .., ..]).assign(&self.w);
            }
            Ok((scores, grads.into_dyn()))
        }
    }

    fn random_image(side: usize, seed: u64) -> Array2<f32> {
        let mut rng = stream_rng(seed, 0);
        Array2::from_shape_fn((side, side), |_| (normal_f64(&mut rng) * 0.25 + 0.5) as f32)
    }

    fn random_weights(side: usize, seed: u64) -> Array2<f32> {
        let mut rng = stream_rng(seed, 1);
        Array2::from_shape_fn((side, side), |_| normal_f64(&mut rng) as f32)
    }

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            image_height: 16,
            image_width: 16,
            attr_channels: 4,
            content_channels: 8,
            widths: [4, 8, 8, 8],
            seed: 17,
            ..Default::default()
        }
    }

    #[test]
    fn occlusion_matches_brute_force_on_a_dense_grid() {
        let scorer = LinearScorer { w: random_weights(8, 1) };
        let image = random_image(8, 2);
        let map = occlusion_map(&scorer, &image, 2, 2, 0.0).unwrap();

        // brute force: every placement covers each pixel exactly once here
        let f_orig = scorer.score(&image).unwrap();
        for bi in (0..=6).step_by(2) {
            for bj in (0..=6).step_by(2) {
                let mut occluded = image.clone();
                occluded.slice_mut(ndarray::s![bi..bi + 2, bj..bj + 2]).fill(0.0);
                let diff = f_orig - scorer.score(&occluded).unwrap();
                for p in bi..bi + 2 {
                    for q in bj..bj + 2 {
                        assert!(
                            (map[[p, q]] as f64 - diff).abs() <= 1e-6,
                            "pixel ({p},{q}): {} vs {diff}",
                            map[[p, q]]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn occlusion_of_a_baseline_valued_image_is_zero() {
        let scorer = LinearScorer { w: random_weights(8, 3) };
        let image = Array2::from_elem((8, 8), 0.25f32);
        let map = occlusion_map(&scorer, &image, 3, 2, 0.25).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn occlusion_overlapping_placements_average_block_sums() {
        // uniform weights: each placement's difference is the occluded block
        // sum, and overlapping placements average their differences
        let scorer = LinearScorer { w: Array2::from_elem((6, 6), 1.0) };
        let image = random_image(6, 4);
        let map = occlusion_map(&scorer, &image, 2, 1, 0.0).unwrap();
        // interior pixel (2,2) is covered by placements with top-left in
        // {1,2}×{1,2}
        let mut expected = 0.0f64;
        for bi in 1..=2 {
            for bj in 1..=2 {
                let mut block_sum = 0.0f64;
                for p in bi..bi + 2 {
                    for q in bj..bj + 2 {
                        block_sum += image[[p, q]] as f64;
                    }
                }
                expected += block_sum;
            }
        }
        expected /= 4.0;
        assert!((map[[2, 2]] as f64 - expected).abs() <= 1e-6);
    }

    #[test]
    fn occlusion_rejects_oversized_blocks() {
        let scorer = LinearScorer { w: random_weights(8, 5) };
        let image = random_image(8, 6);
        assert!(matches!(
            occlusion_map(&scorer, &image, 9, 2, 0.0).unwrap_err(),
            Error::Contract(_)
        ));
        assert!(matches!(
            occlusion_map(&scorer, &image, 0, 2, 0.0).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn integrated_gradients_of_a_linear_model_are_exact() {
        let scorer = LinearScorer { w: random_weights(8, 7) };
        let image = random_image(8, 8);
        let baseline = Array2::<f32>::zeros((8, 8));
        for steps in [1, 7, 50] {
            let map = integrated_gradients_map(&scorer, &image, &baseline, steps).unwrap();
            for ((&m, &x), &w) in map.iter().zip(image.iter()).zip(scorer.w.iter()) {
                let want = (x as f64 * w as f64) as f32;
                if steps == 1 {
                    assert_eq!(m, want);
                } else {
                    // averaging `steps` equal gradients costs at most one
                    // rounding step
                    assert!(
                        (m - want).abs() <= 2e-7 * want.abs().max(1.0),
                        "steps {steps}: {m} vs {want}"
                    );
                }
            }
        }
        // image at the baseline: zero attribution
        let map = integrated_gradients_map(&scorer, &baseline, &baseline, 5).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integrated_gradients_satisfy_completeness_on_a_cnn() {
        let cnn = BaselineCNN { model: Model::init(tiny_model_config()).unwrap() };
        let baseline = Array2::<f32>::zeros((16, 16));
        let f0 = cnn.score(&baseline).unwrap();
        for seed in 0..3 {
            let image = random_image(16, 40 + seed);
            let map = integrated_gradients_map(&cnn, &image, &baseline, 200).unwrap();
            let total: f64 = map.iter().map(|&v| v as f64).sum();
            let f1 = cnn.score(&image).unwrap();
            let target = f1 - f0;
            assert!(
                (total - target).abs() <= 1e-2 * target.abs().max(1e-6),
                "seed {seed}: attribution sum {total} vs f-difference {target}"
            );
        }
    }

    #[test]
    fn saliency_of_a_linear_model_is_the_absolute_weights() {
        let scorer = LinearScorer { w: random_weights(8, 9) };
        let image = random_image(8, 10);
        let map = gradient_saliency_map(&scorer, &image).unwrap();
        for (&m, &w) in map.iter().zip(scorer.w.iter()) {
            assert_eq!(m, w.abs());
        }
        assert!(map.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn cnn_input_gradients_match_finite_differences_in_f64() {
        // the saliency path differentiates the classifier wrt its input;
        // verify that path at f64 precision on a small image
        let model: Model<f64> = Model::init(ModelConfig {
            image_height: 16,
            image_width: 16,
            attr_channels: 2,
            content_channels: 4,
            widths: [2, 4, 4, 4],
            seed: 23,
            ..Default::default()
        })
        .unwrap();
        let forward = |input: &ArrayD<f64>| -> f64 {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let (mean, _lv) = model.encode_attr(&mut tape, x, false).unwrap();
            let pred = model.predict(&mut tape, mean, false).unwrap();
            let total = tape.sum_all(pred.class_logit);
            tape.scalar(total)
        };
        let mut rng = stream_rng(31, 0);
        let x0 = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 16, 16]), || {
            normal_f64(&mut rng) * 0.25 + 0.5
        });
        let analytic = {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let (mean, _lv) = model.encode_attr(&mut tape, x, false).unwrap();
            let pred = model.predict(&mut tape, mean, false).unwrap();
            let total = tape.sum_all(pred.class_logit);
            tape.backward(total);
            tape.grad(x).unwrap().clone()
        };
        let coords = gradcheck::sample_coords(x0.len(), 24);
        let mut f = forward;
        let worst = gradcheck::check_grad(&mut f, &x0, &analytic, &coords, 1e-5).unwrap();
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn gradcam_combination_closed_forms() {
        // single channel, uniform positive gradient: proportional to ReLU(A)
        let a = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 2]),
            vec![1.0f32, -2.0, 0.5, 0.0],
        )
        .unwrap();
        let g = ArrayD::from_elem(IxDyn(&[1, 2, 2]), 3.0f32);
        let map = combine_gradcam(&a, &g).unwrap();
        assert_eq!(map, ndarray::arr2(&[[3.0, 0.0], [1.5, 0.0]]));

        // zero gradients: identically zero
        let zg = ArrayD::zeros(IxDyn(&[1, 2, 2]));
        let map = combine_gradcam(&a, &zg).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));

        let bad = combine_gradcam(&a, &ArrayD::zeros(IxDyn(&[2, 2, 2]))).unwrap_err();
        assert!(matches!(bad, Error::Contract(_)));
    }

    #[test]
    fn gradcam_map_matches_a_recomputation_from_captured_tensors() {
        let cnn = BaselineCNN { model: Model::init(tiny_model_config()).unwrap() };
        let image = random_image(16, 11);
        let map = gradcam_map(&cnn, &image).unwrap();
        assert_eq!(map.dim(), (16, 16));
        assert!(map.iter().all(|v| v.is_finite()));

        let (a, g) = gradcam_tensors(&cnn, &image).unwrap();
        let c = a.shape()[0];
        let (h, w) = (a.shape()[1], a.shape()[2]);
        let mut expected_low = Array2::<f64>::zeros((h, w));
        for ch in 0..c {
            let alpha: f64 =
                g.index_axis(Axis(0), ch).iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64;
            for p in 0..h {
                for q in 0..w {
                    expected_low[[p, q]] += alpha * a[[ch, p, q]] as f64;
                }
            }
        }
        for p in 0..16 {
            for q in 0..16 {
                let want = expected_low[[p / 16, q / 16]].max(0.0) as f32;
                assert_eq!(map[[p, q]], want);
            }
        }
    }

    #[test]
    fn baseline_training_learns_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data_config = PhantomConfig {
            image_size: 16,
            n_samples: 64,
            train_fraction: 0.75,
            val_fraction: 0.125,
            ..Default::default()
        };
        let manifest = generate_dataset(&data_config, 92, dir.path()).unwrap();
        let train = manifest.load_split(dir.path(), Split::Train).unwrap();

        let bce_over = |cnn: &BaselineCNN| -> f64 {
            let mut total = 0.0;
            for r in &train {
                let logit = cnn.score(&r.image).unwrap();
                total += (1.0 + logit.exp()).ln() - f64::from(r.class_label) * logit;
            }
            total / train.len() as f64
        };
        let fresh = BaselineCNN { model: Model::init(tiny_model_config()).unwrap() };
        let before = bce_over(&fresh);

        let config = BaselineTrainConfig { epochs: 30, batch_size: 8, seed: 5, ..Default::default() };
        let cnn = train_baseline(&train, tiny_model_config(), &config).unwrap();

        let after = bce_over(&cnn);
        assert!(after <= 0.75 * before, "BCE barely moved: {before:.4} -> {after:.4}");
        let mut correct = 0;
        for r in &train {
            let assigned = u8::from(cnn.score(&r.image).unwrap() >= 0.0);
            correct += usize::from(assigned == r.class_label);
        }
        let accuracy = correct as f64 / train.len() as f64;
        assert!(accuracy >= 0.6, "baseline training accuracy {accuracy}");

        let path = dir.path().join("baseline.ckpt");
        cnn.save(&path).unwrap();
        let restored = BaselineCNN::load(&path).unwrap();
        let image = &train[0].image;
        assert_eq!(cnn.score(image).unwrap(), restored.score(image).unwrap());
        let p = restored.class_probability(image).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn rejects_single_class_training_sets() {
        let dir = tempfile::tempdir().unwrap();
        let data_config = PhantomConfig {
            image_size: 16,
            n_samples: 16,
            train_fraction: 0.75,
            val_fraction: 0.125,
            ..Default::default()
        };
        let manifest = generate_dataset(&data_config, 92, dir.path()).unwrap();
        let train = manifest.load_split(dir.path(), Split::Train).unwrap();
        let only_zero: Vec<LoadedRecord> =
            train.into_iter().filter(|r| r.class_label == 0).collect();
        match train_baseline(&only_zero, tiny_model_config(), &BaselineTrainConfig::default()) {
            Err(Error::Config(_)) => {}
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("single-class training set was accepted"),
        }
    }
}
