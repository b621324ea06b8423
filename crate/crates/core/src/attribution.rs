//! Feature-attribution maps by class translation, plus latent-space
//! analysis: pairwise translation bundles, single-subject mean/variance maps
//! from rejection-sampled attributes, attribute-space interpolation, and 2-D
//! embeddings of the attribute latents.
//!
//! Everything here runs the model in test mode: attribute *means* (no
//! sampling noise) and no content noise, so repeated calls are identical.

use crate::embed;
use crate::error::{Error, Result};
use crate::nets::{Model, Prediction};
use crate::synthdata::LoadedRecord;
use crate::trainer::rejection_sample_attr;
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How many attribute draws a single-subject FA map averages by default.
pub const DEFAULT_FA_SAMPLES: usize = 32;

/// Everything produced by translating a class-0 / class-1 pair in both
/// directions: reconstructions, translations, cyclic reconstructions, and
/// the two signed FA maps.
#[derive(Clone, Debug)]
pub struct TranslationBundle {
    pub x: Array2<f32>,
    pub y: Array2<f32>,
    /// Self-reconstructions `G(E^c(x), E^a(x))`.
    pub x_hat: Array2<f32>,
    pub y_hat: Array2<f32>,
    /// Translations: `v = G(E^c(x), E^a(y))`, `mu = G(E^c(y), E^a(x))`.
    pub v: Array2<f32>,
    pub mu: Array2<f32>,
    /// Cyclic reconstructions `G(E^c(v), E^a(mu))` and `G(E^c(mu), E^a(v))`.
    pub x_cc: Array2<f32>,
    pub y_cc: Array2<f32>,
    /// FA maps: `m_x = v - x`, `m_y = mu - y`.
    pub m_x: Array2<f32>,
    pub m_y: Array2<f32>,
}

/// Mean/variance FA map of one subject over several attribute draws.
#[derive(Clone, Debug)]
pub struct FAStatistics {
    pub mean_map: Array2<f32>,
    /// Elementwise population variance; all zeros when `n_samples == 1`.
    pub var_map: Array2<f32>,
    pub n_samples: usize,
    pub predictions: Vec<Prediction>,
}

impl FAStatistics {
    /// Variance needs at least two draws; with one it is zero by convention.
    pub fn variance_defined(&self) -> bool {
        self.n_samples >= 2
    }
}

/// One step of an attribute-space interpolation.
#[derive(Clone, Debug)]
pub struct InterpolationStep {
    pub alpha: f64,
    pub image: Array2<f32>,
    pub fa_map: Array2<f32>,
    pub prediction: Prediction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMethod {
    Tsne,
    Pca,
}

/// One embedded subject: latent coordinates plus its labels for plotting.
#[derive(Clone, Debug, Serialize)]
pub struct EmbeddingPoint {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub phenotype: f64,
    pub class_label: u8,
}

/// Stack single-channel images into the `[n,1,H,W]` layout the model consumes.
pub fn to_batch(images: &[&Array2<f32>]) -> ArrayD<f32> {
    let (h, w) = images[0].dim();
    let mut out = ArrayD::<f32>::zeros(IxDyn(&[images.len(), 1, h, w]));
    for (k, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), k)
            .index_axis_mut(Axis(0), 0)
            .assign(img);
    }
    out
}

/// Extract image `k` of an `[n,1,H,W]` batch as a plain 2-d array.
pub fn from_batch(batch: &ArrayD<f32>, k: usize) -> Array2<f32> {
    batch
        .index_axis(Axis(0), k)
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("image batches are [n,1,H,W]")
}

/// Swap the two rows of a 2-batch, so each item receives the other's latent.
fn swap_pair(t: &ArrayD<f32>) -> ArrayD<f32> {
    ndarray::concatenate(
        Axis(0),
        &[
            t.index_axis(Axis(0), 1).insert_axis(Axis(0)),
            t.index_axis(Axis(0), 0).insert_axis(Axis(0)),
        ],
    )
    .expect("both rows share a shape")
}

/// Repeat a single item `[1, ...]` into an `n`-batch.
fn repeat_batch(t: &ArrayD<f32>, n: usize) -> ArrayD<f32> {
    let item = t.index_axis(Axis(0), 0);
    let mut shape = vec![n];
    shape.extend_from_slice(item.shape());
    item.broadcast(IxDyn(&shape)).expect("prepend broadcast").to_owned()
}

/// Translate a pair in both directions and assemble the full bundle.
/// `x` is conventionally the class-0 image and `y` the class-1 image; the
/// computation itself is symmetric.
pub fn translate_pair(
    model: &Model<f32>,
    x: &Array2<f32>,
    y: &Array2<f32>,
) -> Result<TranslationBundle> {
    if x.dim() != y.dim() {
        return Err(Error::Contract(format!(
            "pair images disagree in shape: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let pair = to_batch(&[x, y]);
    let content = model.encode_content_values(&pair)?;
    let attr = model.encode_attr_values(&pair)?.mean;
    let recon = model.generate_values(&content, &attr)?;
    let attr_swapped = swap_pair(&attr);
    let translated = model.generate_values(&content, &attr_swapped)?;

    let cyclic_content = model.encode_content_values(&translated)?;
    let cyclic_attr = model.encode_attr_values(&translated)?.mean;
    let cyclic_attr_swapped = swap_pair(&cyclic_attr);
    let cyclic = model.generate_values(&cyclic_content, &cyclic_attr_swapped)?;

    let v = from_batch(&translated, 0);
    let mu = from_batch(&translated, 1);
    let m_x = &v - x;
    let m_y = &mu - y;
    Ok(TranslationBundle {
        x: x.clone(),
        y: y.clone(),
        x_hat: from_batch(&recon, 0),
        y_hat: from_batch(&recon, 1),
        v,
        mu,
        x_cc: from_batch(&cyclic, 0),
        y_cc: from_batch(&cyclic, 1),
        m_x,
        m_y,
    })
}

/// Single-subject attribution: draw `n_samples` prior attributes accepted
/// for `target_class`, translate `x` with each, and return the elementwise
/// mean and population variance of the FA maps along with each draw's
/// prediction. Rejection exhaustion propagates as an error.
pub fn attribute_single(
    model: &Model<f32>,
    x: &Array2<f32>,
    target_class: u8,
    n_samples: usize,
    max_attempts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FAStatistics> {
    if n_samples == 0 {
        return Err(Error::Contract("n_samples must be at least 1".into()));
    }
    let x4 = to_batch(&[x]);
    let content = model.encode_content_values(&x4)?;

    let attr_shape = model.config.attr_shape();
    let mut draws =
        ArrayD::<f32>::zeros(IxDyn(&[n_samples, attr_shape[0], attr_shape[1], attr_shape[2]]));
    let mut classify = |sample: &ArrayD<f32>| -> Result<f64> {
        let batched = sample.clone().insert_axis(Axis(0));
        Ok(model.predict_values(&batched)?[0].class_logit)
    };
    for i in 0..n_samples {
        let (sample, _attempts) =
            rejection_sample_attr(&mut classify, target_class, &attr_shape, max_attempts, rng)?;
        draws.index_axis_mut(Axis(0), i).assign(&sample);
    }

    let content_n = repeat_batch(&content, n_samples);
    let translated = model.generate_values(&content_n, &draws)?;
    let predictions = model.predict_values(&draws)?;

    let (h, w) = x.dim();
    let maps: Vec<Array2<f32>> =
        (0..n_samples).map(|i| &from_batch(&translated, i) - x).collect();
    let mut mean64 = Array2::<f64>::zeros((h, w));
    for m in &maps {
        mean64.zip_mut_with(m, |acc, &v| *acc += v as f64);
    }
    mean64.mapv_inplace(|v| v / n_samples as f64);
    let mut var64 = Array2::<f64>::zeros((h, w));
    for m in &maps {
        ndarray::Zip::from(&mut var64).and(&mean64).and(m).for_each(|acc, &mu, &v| {
            let d = v as f64 - mu;
            *acc += d * d;
        });
    }
    var64.mapv_inplace(|v| v / n_samples as f64);

    Ok(FAStatistics {
        mean_map: mean64.mapv(|v| v as f32),
        var_map: var64.mapv(|v| v as f32),
        n_samples,
        predictions,
    })
}

/// Linear interpolation in attribute space between the posterior means of
/// `x` and `y`, decoded with `x`'s content. Each step yields the generated
/// image, its FA map against `x`, and the predictions for the interpolated
/// latent. Endpoints reproduce the plain reconstruction / translation paths.
pub fn interpolate(
    model: &Model<f32>,
    x: &Array2<f32>,
    y: &Array2<f32>,
    steps: usize,
) -> Result<Vec<InterpolationStep>> {
    if steps < 2 {
        return Err(Error::Contract(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    if x.dim() != y.dim() {
        return Err(Error::Contract(format!(
            "pair images disagree in shape: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let pair = to_batch(&[x, y]);
    let content = model.encode_content_values(&pair)?;
    let attr = model.encode_attr_values(&pair)?.mean;
    let ax = attr.index_axis(Axis(0), 0);
    let ay = attr.index_axis(Axis(0), 1);

    let a = model.config.attr_shape();
    let mut latents = ArrayD::<f32>::zeros(IxDyn(&[steps, a[0], a[1], a[2]]));
    let alphas: Vec<f64> = (0..steps).map(|k| k as f64 / (steps - 1) as f64).collect();
    for (k, &alpha) in alphas.iter().enumerate() {
        let mut row = latents.index_axis_mut(Axis(0), k);
        if k == 0 {
            row.assign(&ax);
        } else if k == steps - 1 {
            row.assign(&ay);
        } else {
            let am = alpha as f32;
            ndarray::Zip::from(&mut row).and(&ax).and(&ay).for_each(|out, &a0, &a1| {
                *out = (1.0 - am) * a0 + am * a1;
            });
        }
    }

    let content_x = content.index_axis(Axis(0), 0).insert_axis(Axis(0)).to_owned();
    let content_k = repeat_batch(&content_x, steps);
    let images = model.generate_values(&content_k, &latents)?;
    let predictions = model.predict_values(&latents)?;

    Ok(alphas
        .into_iter()
        .enumerate()
        .map(|(k, alpha)| {
            let image = from_batch(&images, k);
            let fa_map = &image - x;
            InterpolationStep { alpha, image, fa_map, prediction: predictions[k] }
        })
        .collect())
}

/// Embed every record's attribute mean into 2-D with tSNE or PCA.
pub fn embed_latents(
    model: &Model<f32>,
    records: &[LoadedRecord],
    method: EmbedMethod,
    seed: u64,
) -> Result<Vec<EmbeddingPoint>> {
    if records.is_empty() {
        return Err(Error::InsufficientData { needed: 2, got: 0 });
    }
    let n = records.len();
    let d = model.config.attr_dim();
    let mut latents = Array2::<f64>::zeros((n, d));
    for (start, chunk) in records.chunks(64).enumerate().map(|(i, c)| (i * 64, c)) {
        let images: Vec<&Array2<f32>> = chunk.iter().map(|r| &r.image).collect();
        let batch = to_batch(&images);
        let mean = model.encode_attr_values(&batch)?.mean;
        for (k, _) in chunk.iter().enumerate() {
            let flat: Vec<f64> =
                mean.index_axis(Axis(0), k).iter().map(|&v| v as f64).collect();
            latents.row_mut(start + k).assign(&ndarray::Array1::from(flat));
        }
    }
    let coords = match method {
        EmbedMethod::Tsne => embed::tsne(&latents, seed)?,
        EmbedMethod::Pca => embed::pca_2d(&latents)?,
    };
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| EmbeddingPoint {
            id: r.id,
            x: coords[[i, 0]],
            y: coords[[i, 1]],
            phenotype: r.phenotype,
            class_label: r.class_label,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelConfig;
    use crate::rng::stream_rng;
    use crate::synthdata::{generate_dataset, PhantomConfig, Split};
    use rand::Rng;

    fn tiny_model() -> Model<f32> {
        Model::init(ModelConfig {
            image_height: 16,
            image_width: 16,
            attr_channels: 4,
            content_channels: 8,
            widths: [4, 8, 8, 8],
            seed: 7,
            ..Default::default()
        })
        .unwrap()
    }

    fn test_images() -> (Array2<f32>, Array2<f32>) {
        let mut rng = stream_rng(3, 0);
        let mut a = Array2::<f32>::zeros((16, 16));
        let mut b = Array2::<f32>::zeros((16, 16));
        for v in a.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        for v in b.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        (a, b)
    }

    #[test]
    fn bundle_satisfies_its_defining_identities() {
        let model = tiny_model();
        let (x, y) = test_images();
        let bundle = translate_pair(&model, &x, &y).unwrap();
        // the map is the difference by definition
        assert_eq!(bundle.m_x, &bundle.v - &bundle.x);
        assert_eq!(bundle.m_y, &bundle.mu - &bundle.y);
        // adding it back reconstructs the translation to within the one
        // rounding step the subtraction introduced
        for ((&m, &xv), &v) in bundle.m_x.iter().zip(bundle.x.iter()).zip(bundle.v.iter()) {
            assert!((m + xv - v).abs() <= 2e-7 * v.abs().max(1.0), "{m} + {xv} vs {v}");
        }
        for field in [&bundle.x_hat, &bundle.y_hat, &bundle.x_cc, &bundle.y_cc] {
            assert!(field.iter().all(|v| v.is_finite()));
            assert_eq!(field.dim(), (16, 16));
        }
    }

    #[test]
    fn self_translation_collapses_to_reconstruction() {
        let model = tiny_model();
        let (x, _) = test_images();
        let bundle = translate_pair(&model, &x, &x).unwrap();
        assert_eq!(bundle.v, bundle.x_hat);
        assert_eq!(bundle.mu, bundle.y_hat);
        let expected = &bundle.x_hat - &x;
        assert_eq!(bundle.m_x, expected);
    }

    #[test]
    fn pair_shape_mismatch_is_a_contract_error() {
        let model = tiny_model();
        let (x, _) = test_images();
        let y = Array2::<f32>::zeros((8, 8));
        assert!(matches!(translate_pair(&model, &x, &y).unwrap_err(), Error::Contract(_)));
    }

    #[test]
    fn single_subject_statistics_match_a_two_pass_recount() {
        let model = tiny_model();
        let (x, _) = test_images();
        let n = 5;
        let mut rng = stream_rng(11, 2);
        let mut oracle_rng = rng.clone();
        let stats = attribute_single(&model, &x, 1, n, 200, &mut rng).unwrap();
        assert_eq!(stats.n_samples, n);
        assert_eq!(stats.predictions.len(), n);
        assert!(stats.variance_defined());
        assert!(stats.var_map.iter().all(|&v| v >= 0.0));

        // independently redraw the same attributes and translate one by one
        let attr_shape = model.config.attr_shape();
        let mut classify = |sample: &ArrayD<f32>| -> Result<f64> {
            let batched = sample.clone().insert_axis(Axis(0));
            Ok(model.predict_values(&batched)?[0].class_logit)
        };
        let mut maps = Vec::new();
        for _ in 0..n {
            let (z, _) =
                rejection_sample_attr(&mut classify, 1, &attr_shape, 200, &mut oracle_rng)
                    .unwrap();
            let x4 = to_batch(&[&x]);
            let content = model.encode_content_values(&x4).unwrap();
            let img = model.generate_values(&content, &z.insert_axis(Axis(0))).unwrap();
            maps.push(&from_batch(&img, 0) - &x);
        }
        let mut mean = Array2::<f64>::zeros(x.dim());
        for m in &maps {
            mean.zip_mut_with(m, |a, &v| *a += v as f64);
        }
        mean.mapv_inplace(|v| v / n as f64);
        let mut var = Array2::<f64>::zeros(x.dim());
        for m in &maps {
            ndarray::Zip::from(&mut var).and(&mean).and(m).for_each(|a, &mu, &v| {
                *a += (v as f64 - mu) * (v as f64 - mu);
            });
        }
        var.mapv_inplace(|v| v / n as f64);
        // the recount follows the same accumulation, so only the final cast
        // to f32 separates the two
        for (got, want) in stats.mean_map.iter().zip(mean.iter()) {
            assert_eq!(*got, *want as f32, "mean {got} vs {want}");
        }
        for (got, want) in stats.var_map.iter().zip(var.iter()) {
            assert_eq!(*got, *want as f32, "var {got} vs {want}");
        }

        // the same statistics from the reversed sample order (order invariance)
        maps.reverse();
        let mut mean_rev = Array2::<f64>::zeros(x.dim());
        for m in &maps {
            mean_rev.zip_mut_with(m, |a, &v| *a += v as f64);
        }
        mean_rev.mapv_inplace(|v| v / n as f64);
        for (a, b) in mean_rev.iter().zip(mean.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_sample_variance_is_zero_and_flagged() {
        let model = tiny_model();
        let (x, _) = test_images();
        let mut rng = stream_rng(12, 2);
        let stats = attribute_single(&model, &x, 0, 1, 200, &mut rng).unwrap();
        assert!(!stats.variance_defined());
        assert!(stats.var_map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejection_exhaustion_propagates_from_attribution() {
        let mut model = tiny_model();
        // force the class head to a huge negative logit: class 1 unreachable
        model.params.get_mut("enc_attr.fc1.b").unwrap().fill(-100.0);
        model.params.get_mut("enc_attr.fc1.w").unwrap().fill(0.0);
        let (x, _) = test_images();
        let mut rng = stream_rng(13, 2);
        let err = attribute_single(&model, &x, 1, 2, 5, &mut rng).unwrap_err();
        assert!(matches!(err, Error::RejectionExhausted { attempts: 5, .. }), "got {err:?}");
    }

    #[test]
    fn interpolation_grid_and_endpoints() {
        let model = tiny_model();
        let (x, y) = test_images();
        let steps = interpolate(&model, &x, &y, 11).unwrap();
        assert_eq!(steps.len(), 11);
        for (k, step) in steps.iter().enumerate() {
            assert_eq!(step.alpha, k as f64 / 10.0);
        }
        // endpoints coincide with the non-interpolated code paths
        let bundle = translate_pair(&model, &x, &y).unwrap();
        assert_eq!(steps[0].image, bundle.x_hat);
        let first_map = &bundle.x_hat - &x;
        assert_eq!(steps[0].fa_map, first_map);
        assert_eq!(steps[10].image, bundle.v);
        assert_eq!(steps[10].fa_map, bundle.m_x);

        let two = interpolate(&model, &x, &y, 2).unwrap();
        assert_eq!(two[0].image, steps[0].image);
        assert_eq!(two[1].image, steps[10].image);

        assert!(matches!(interpolate(&model, &x, &y, 1).unwrap_err(), Error::Contract(_)));
    }

    #[test]
    fn latents_embed_for_both_methods() {
        let dir = tempfile::tempdir().unwrap();
        let config = PhantomConfig {
            image_size: 16,
            n_samples: 16,
            train_fraction: 0.75,
            val_fraction: 0.125,
            ..Default::default()
        };
        let manifest = generate_dataset(&config, 21, dir.path()).unwrap();
        let records = manifest.load_split(dir.path(), Split::Train).unwrap();
        let model = tiny_model();

        let pca = embed_latents(&model, &records, EmbedMethod::Pca, 0).unwrap();
        assert_eq!(pca.len(), records.len());
        for (p, r) in pca.iter().zip(&records) {
            assert_eq!(p.id, r.id);
            assert_eq!(p.class_label, r.class_label);
            assert!(p.x.is_finite() && p.y.is_finite());
        }

        let tsne = embed_latents(&model, &records, EmbedMethod::Tsne, 4).unwrap();
        assert_eq!(tsne.len(), records.len());

        let err = embed_latents(&model, &records[..4], EmbedMethod::Tsne, 4).unwrap_err();
        assert!(matches!(err, Error::InsufficientData { needed: 5, got: 4 }));
    }
}
