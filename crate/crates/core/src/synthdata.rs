//! Synthetic 2D "brain-like" phantom dataset.
//!
//! Each sample is an elliptical tissue region with a bright cortical band and
//! a dark central ventricle. A continuous phenotype `t` in `[0,1]` drives the
//! class-relevant features: the ventricle area grows linearly with `t` and the
//! cortical band thins linearly with `t`. Everything else — ellipse shape,
//! rotation, base intensity, speckle texture — is class-irrelevant content.
//!
//! Every sample carries a ground-truth difference map: the pixelwise
//! subtraction between its own rendering and a rendering of the same content
//! at the mirrored phenotype `1 − t`, the synthetic analogue of a subject
//! scanned before and after conversion.
//!
//! Dataset layout on disk: `manifest.jsonl` (one header line, then one JSON
//! record per line) plus one tensor file per record for the image (`[H,W]`),
//! the ground-truth difference (`[H,W]`), and the masks (`[2,H,W]`, channel 0
//! tissue, channel 1 lesions).

use crate::error::{Error, Result};
use crate::rng::{normal_f64, stream_rng};
use crate::tensorfile;
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::io::Write as IoWrite;
use std::path::Path;

/// Cortical band thickness in pixels at `t = 0` and `t = 1` (linear between).
const BAND_THICKNESS_T0: f64 = 6.0;
const BAND_THICKNESS_T1: f64 = 2.0;
/// Ventricle axes as a fraction of the tissue axes at `t = 0`; the area grows
/// linearly in `t` by `VENT_GROWTH`×.
const VENT_SCALE: f64 = 0.18;
const VENT_GROWTH: f64 = 2.0;
const VENT_INTENSITY: f64 = 0.08;
const BAND_DELTA: f64 = 0.25;
const LESION_DELTA: f64 = 0.35;
/// Width in pixels of the linear intensity ramp at region boundaries.
const EDGE_WIDTH: f64 = 1.0;
/// Amplitude of the multiplicative speckle texture.
const SPECKLE_SIGMA: f64 = 0.05;

/// Class-irrelevant generative factors of one subject.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContentFactors {
    /// Tissue ellipse semi-axes in pixels, within `[size/4, size/2.5]`.
    pub ellipse_axes: (f64, f64),
    /// Rotation in radians, within `[-π/4, π/4]`.
    pub rotation: f64,
    /// Interior tissue intensity, within `[0.3, 0.7]`.
    pub base_intensity: f64,
    /// Seed of the multiplicative speckle texture (independent of `t`).
    pub texture_seed: u64,
}

impl ContentFactors {
    /// Draw content factors uniformly from their invariant ranges.
    pub fn sample(rng: &mut ChaCha8Rng, image_size: usize) -> Self {
        let lo = image_size as f64 / 4.0;
        let hi = image_size as f64 / 2.5;
        ContentFactors {
            ellipse_axes: (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)),
            rotation: rng.gen_range(-std::f64::consts::FRAC_PI_4..=std::f64::consts::FRAC_PI_4),
            base_intensity: rng.gen_range(0.3..=0.7),
            texture_seed: rng.gen(),
        }
    }

    fn validate(&self, image_size: usize) -> Result<()> {
        let lo = image_size as f64 / 4.0 - 1e-9;
        let hi = image_size as f64 / 2.5 + 1e-9;
        let (a, b) = self.ellipse_axes;
        if !(lo..=hi).contains(&a) || !(lo..=hi).contains(&b) {
            return Err(Error::Domain(format!(
                "ellipse axes ({a}, {b}) outside [{lo:.2}, {hi:.2}]"
            )));
        }
        let quarter_pi = std::f64::consts::FRAC_PI_4 + 1e-9;
        if self.rotation.abs() > quarter_pi {
            return Err(Error::Domain(format!("rotation {} outside [-π/4, π/4]", self.rotation)));
        }
        if !(0.3 - 1e-9..=0.7 + 1e-9).contains(&self.base_intensity) {
            return Err(Error::Domain(format!(
                "base intensity {} outside [0.3, 0.7]",
                self.base_intensity
            )));
        }
        Ok(())
    }
}

/// Hard (unsmoothed) masks of the phantom's geometric regions.
pub struct RegionMasks {
    pub tissue: Array2<bool>,
    pub band: Array2<bool>,
    pub ventricle: Array2<bool>,
}

/// One generated subject.
pub struct PhenotypeSample {
    pub image: Array2<f32>,
    pub class_label: u8,
    pub phenotype: f64,
    pub content: ContentFactors,
    pub lesion_mask: Array2<bool>,
    pub gt_diff: Array2<f32>,
    pub tissue_mask: Array2<bool>,
}

/// Dataset generator configuration. Phenotypes are uniform on `[0,1]` with
/// classes defined by `t > 0.5`; draws are stratified by record parity so the
/// two classes stay balanced to within one record.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub image_size: usize,
    pub n_samples: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Probability that a class-1 subject receives punctate lesions.
    pub lesion_probability: f64,
    pub lesion_count: usize,
    pub lesion_radius: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            image_size: 64,
            n_samples: 2000,
            train_fraction: 0.8,
            val_fraction: 0.1,
            lesion_probability: 0.0,
            lesion_count: 3,
            lesion_radius: 2.0,
        }
    }
}

impl PhantomConfig {
    fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction)
            || !(0.0..=1.0).contains(&self.val_fraction)
            || self.train_fraction + self.val_fraction > 1.0 + 1e-12
        {
            return Err(Error::Config("split fractions must be in [0,1] and sum to at most 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(Error::Config("lesion_probability must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordMeta {
    pub id: usize,
    pub image_path: String,
    pub mask_path: String,
    pub gt_diff_path: String,
    pub class_label: u8,
    pub phenotype: f64,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestHeader {
    generator_config_hash: String,
    image_size: usize,
    n_records: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub records: Vec<RecordMeta>,
    pub generator_config_hash: String,
    pub image_size: usize,
}

impl DatasetManifest {
    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &RecordMeta> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split_records(split).count()
    }

    /// Load every record of a split into memory, in id order.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<LoadedRecord>> {
        self.split_records(split).map(|meta| load_record(dir, meta)).collect()
    }

    /// Parse and validate `manifest.jsonl` from a dataset directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
        let mut lines = text.lines();
        let header: ManifestHeader = serde_json::from_str(
            lines.next().ok_or_else(|| Error::Format("empty manifest".into()))?,
        )?;
        let mut records = Vec::with_capacity(header.n_records);
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<RecordMeta>(line)?);
        }
        let manifest = DatasetManifest {
            records,
            generator_config_hash: header.generator_config_hash,
            image_size: header.image_size,
        };
        manifest.validate(dir)?;
        Ok(manifest)
    }

    fn validate(&self, dir: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for rec in &self.records {
            if !seen.insert(rec.id) {
                return Err(Error::Format(format!("duplicate record id {}", rec.id)));
            }
            for p in [&rec.image_path, &rec.mask_path, &rec.gt_diff_path] {
                if !dir.join(p).is_file() {
                    return Err(Error::Format(format!("manifest path does not resolve: {p}")));
                }
            }
        }
        let split_sum = self.split_len(Split::Train) + self.split_len(Split::Val)
            + self.split_len(Split::Test);
        if split_sum != self.records.len() {
            return Err(Error::Format("split sizes do not sum to record count".into()));
        }
        Ok(())
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header = ManifestHeader {
            generator_config_hash: self.generator_config_hash.clone(),
            image_size: self.image_size,
            n_records: self.records.len(),
        };
        writeln!(out, "{}", serde_json::to_string(&header)?).expect("vec write");
        for rec in &self.records {
            writeln!(out, "{}", serde_json::to_string(rec)?).expect("vec write");
        }
        std::fs::write(dir.join("manifest.jsonl"), out)?;
        Ok(())
    }
}

/// A record loaded back from disk.
pub struct LoadedRecord {
    pub id: usize,
    pub image: Array2<f32>,
    pub tissue_mask: Array2<bool>,
    pub lesion_mask: Array2<bool>,
    pub gt_diff: Array2<f32>,
    pub class_label: u8,
    pub phenotype: f64,
}

/// Load one record's tensors given its manifest entry.
pub fn load_record(dir: &Path, meta: &RecordMeta) -> Result<LoadedRecord> {
    let image = to_2d(tensorfile::read(&dir.join(&meta.image_path))?)?;
    let gt_diff = to_2d(tensorfile::read(&dir.join(&meta.gt_diff_path))?)?;
    let masks = tensorfile::read(&dir.join(&meta.mask_path))?;
    if masks.ndim() != 3 || masks.shape()[0] != 2 {
        return Err(Error::Format("mask tensor must have shape [2,H,W]".into()));
    }
    let tissue_mask = masks.index_axis(Axis(0), 0).mapv(|v| v > 0.5).into_dimensionality().unwrap();
    let lesion_mask = masks.index_axis(Axis(0), 1).mapv(|v| v > 0.5).into_dimensionality().unwrap();
    Ok(LoadedRecord {
        id: meta.id,
        image,
        tissue_mask,
        lesion_mask,
        gt_diff,
        class_label: meta.class_label,
        phenotype: meta.phenotype,
    })
}

fn to_2d(t: ArrayD<f32>) -> Result<Array2<f32>> {
    t.into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::Format("expected a 2D tensor".into()))
}

/// Phenotype and class for record `id`, stratified by parity: even records are
/// class 0 with `t` uniform on `[0, 0.5)`, odd are class 1 with `t` on `(0.5, 1]`.
/// The marginal distribution over the dataset is uniform on `[0,1]`.
pub fn sample_phenotype(rng: &mut ChaCha8Rng, id: usize) -> (f64, u8) {
    let u: f64 = rng.gen_range(0.0..0.5);
    if id % 2 == 0 {
        (u, 0)
    } else {
        (1.0 - u, 1)
    }
}

/// Render the phantom for given content factors and phenotype `t`.
pub fn render_phantom(content: &ContentFactors, t: f64, image_size: usize) -> Result<Array2<f32>> {
    Ok(render_with_regions(content, t, image_size)?.0)
}

/// Render plus the hard region masks used by tests and evaluation.
pub fn render_with_regions(
    content: &ContentFactors,
    t: f64,
    image_size: usize,
) -> Result<(Array2<f32>, RegionMasks)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("phenotype t={t} outside [0,1]")));
    }
    content.validate(image_size)?;
    let n = image_size;
    let (a, b) = content.ellipse_axes;
    let tau = BAND_THICKNESS_T0 + (BAND_THICKNESS_T1 - BAND_THICKNESS_T0) * t;
    let vent_scale = VENT_SCALE * (1.0 + (VENT_GROWTH - 1.0) * t).sqrt();
    let (cos_r, sin_r) = (content.rotation.cos(), content.rotation.sin());
    let center = n as f64 / 2.0;
    let base = content.base_intensity;

    // normalised elliptical radius and approximate pixel-distance to the rim
    let radius = |u: f64, w: f64, ea: f64, eb: f64| -> (f64, f64) {
        let r = ((u / ea).powi(2) + (w / eb).powi(2)).sqrt();
        (r, (1.0 - r) * 0.5 * (ea + eb))
    };
    // 1-pixel linear ramp: 1 inside, 0 outside
    let edge = |d: f64| (d / EDGE_WIDTH + 0.5).clamp(0.0, 1.0);

    let mut texture_rng = stream_rng(content.texture_seed, 0);
    let mut image = Array2::<f32>::zeros((n, n));
    let mut tissue = Array2::<bool>::from_elem((n, n), false);
    let mut band = Array2::<bool>::from_elem((n, n), false);
    let mut ventricle = Array2::<bool>::from_elem((n, n), false);

    for i in 0..n {
        for j in 0..n {
            let x = j as f64 + 0.5 - center;
            let y = i as f64 + 0.5 - center;
            let u = x * cos_r + y * sin_r;
            let w = -x * sin_r + y * cos_r;
            let (r_out, d_out) = radius(u, w, a, b);
            let (r_in, d_in) = radius(u, w, a - tau, b - tau);
            let (r_v, d_v) = radius(u, w, vent_scale * a, vent_scale * b);

            let w_tissue = edge(d_out);
            let w_core = edge(d_in);
            let w_vent = edge(d_v);
            let intensity = w_tissue
                * (base * w_core * (1.0 - w_vent)
                    + (base + BAND_DELTA) * (1.0 - w_core)
                    + VENT_INTENSITY * w_vent);

            // speckle is drawn for every pixel so the texture field is
            // independent of the geometry (and therefore of t)
            let speckle = 1.0 + SPECKLE_SIGMA * normal_f64(&mut texture_rng);
            image[[i, j]] = (intensity * speckle).clamp(0.0, 1.0) as f32;

            tissue[[i, j]] = r_out <= 1.0;
            band[[i, j]] = r_out <= 1.0 && r_in >= 1.0;
            ventricle[[i, j]] = r_v <= 1.0;
        }
    }
    Ok((image, RegionMasks { tissue, band, ventricle }))
}

/// Place `count` non-overlapping bright discs uniformly inside the tissue
/// mask. Returns the modified image and the lesion mask.
pub fn add_punctate_lesions(
    image: &Array2<f32>,
    tissue_mask: &Array2<bool>,
    count: usize,
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f32>, Array2<bool>)> {
    if radius < 1.0 {
        return Err(Error::Domain(format!("lesion radius {radius} must be at least 1 px")));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let r2 = radius * radius;
    let ir = radius.ceil() as isize;
    let offsets: Vec<(isize, isize)> = (-ir..=ir)
        .flat_map(|dy| (-ir..=ir).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= r2)
        .collect();

    let mut out = image.clone();
    let mut mask = Array2::<bool>::from_elem((h, w), false);
    for placed in 0..count {
        let mut ok = false;
        for _attempt in 0..1000 {
            let ci = rng.gen_range(0..h) as isize;
            let cj = rng.gen_range(0..w) as isize;
            let fits = offsets.iter().all(|&(dy, dx)| {
                let (i, j) = (ci + dy, cj + dx);
                i >= 0
                    && j >= 0
                    && (i as usize) < h
                    && (j as usize) < w
                    && tissue_mask[[i as usize, j as usize]]
                    && !mask[[i as usize, j as usize]]
            });
            if fits {
                for &(dy, dx) in &offsets {
                    let (i, j) = ((ci + dy) as usize, (cj + dx) as usize);
                    mask[[i, j]] = true;
                    out[[i, j]] = (out[[i, j]] + LESION_DELTA as f32).min(1.0);
                }
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Placement { requested: count, placed });
        }
    }
    Ok((out, mask))
}

/// Render a sample at `t_source` together with the exact ground-truth
/// difference map toward `t_reference` (same content). Lesions are not
/// applied here; the difference map reflects phenotype-driven change only.
pub fn make_pair_with_gt(
    content: &ContentFactors,
    t_source: f64,
    t_reference: f64,
    image_size: usize,
) -> Result<PhenotypeSample> {
    let (image, regions) = render_with_regions(content, t_source, image_size)?;
    let reference = render_phantom(content, t_reference, image_size)?;
    let gt_diff = &reference - &image;
    Ok(PhenotypeSample {
        image,
        class_label: u8::from(t_source > 0.5),
        phenotype: t_source,
        content: content.clone(),
        lesion_mask: Array2::from_elem((image_size, image_size), false),
        gt_diff,
        tissue_mask: regions.tissue,
    })
}

/// Generate one record deterministically from `(seed, id)`.
fn generate_record(config: &PhantomConfig, seed: u64, id: usize) -> Result<PhenotypeSample> {
    let mut rng = stream_rng(seed, id as u64 + 1);
    let (t, _class) = sample_phenotype(&mut rng, id);
    let content = ContentFactors::sample(&mut rng, config.image_size);
    let mut sample = make_pair_with_gt(&content, t, 1.0 - t, config.image_size)?;
    if sample.class_label == 1
        && config.lesion_probability > 0.0
        && rng.gen_bool(config.lesion_probability)
    {
        let (image, lesion_mask) = add_punctate_lesions(
            &sample.image,
            &sample.tissue_mask,
            config.lesion_count,
            config.lesion_radius,
            &mut rng,
        )?;
        sample.image = image;
        sample.lesion_mask = lesion_mask;
    }
    Ok(sample)
}

fn record_paths(id: usize) -> (String, String, String) {
    (
        format!("images/{id:05}.tns"),
        format!("masks/{id:05}.tns"),
        format!("gt/{id:05}.tns"),
    )
}

/// Hash of the generator configuration and seed that identifies a dataset.
pub fn config_hash(config: &PhantomConfig, seed: u64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(config).expect("config serializes").as_bytes());
    hasher.update(seed.to_le_bytes());
    hex::encode(hasher.finalize())
}

/// Generate the full dataset under `out_dir`. Bit-identical for a given
/// `(config, seed)` regardless of thread count: every record derives its
/// randomness from its own id.
pub fn generate_dataset(
    config: &PhantomConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    for sub in ["images", "masks", "gt"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }

    let n = config.n_samples;
    let n_train = (n as f64 * config.train_fraction).round() as usize;
    let n_val = (n as f64 * config.val_fraction).round() as usize;
    if n_train + n_val > n {
        return Err(Error::Config("split fractions leave no room for the test split".into()));
    }

    let samples: Vec<PhenotypeSample> = (0..n)
        .into_par_iter()
        .map(|id| generate_record(config, seed, id))
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(n);
    for (id, sample) in samples.into_iter().enumerate() {
        let (image_path, mask_path, gt_path) = record_paths(id);
        tensorfile::write(&out_dir.join(&image_path), &sample.image.clone().into_dyn())?;
        tensorfile::write(&out_dir.join(&gt_path), &sample.gt_diff.clone().into_dyn())?;
        let mut masks = Array3::<f32>::zeros((2, config.image_size, config.image_size));
        masks
            .index_axis_mut(Axis(0), 0)
            .assign(&sample.tissue_mask.mapv(|b| if b { 1.0 } else { 0.0 }));
        masks
            .index_axis_mut(Axis(0), 1)
            .assign(&sample.lesion_mask.mapv(|b| if b { 1.0 } else { 0.0 }));
        tensorfile::write(&out_dir.join(&mask_path), &masks.into_dyn())?;

        let split = if id < n_train {
            Split::Train
        } else if id < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        records.push(RecordMeta {
            id,
            image_path,
            mask_path,
            gt_diff_path: gt_path,
            class_label: sample.class_label,
            phenotype: sample.phenotype,
            split,
        });
    }

    let manifest = DatasetManifest {
        records,
        generator_config_hash: config_hash(config, seed),
        image_size: config.image_size,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Convert a loaded image to the `[1,H,W]` dynamic tensor the nets consume.
pub fn image_to_tensor(image: &Array2<f32>) -> ArrayD<f32> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    image.clone().into_shape_with_order(IxDyn(&[1, h, w])).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::Array2;

    fn test_content(seed: u64) -> ContentFactors {
        let mut rng = stream_rng(seed, 0);
        ContentFactors::sample(&mut rng, 64)
    }

    /// Independent rasterizer for the rotated-ellipse membership test.
    fn inside_ellipse(
        i: usize,
        j: usize,
        content: &ContentFactors,
        axes: (f64, f64),
        size: usize,
    ) -> bool {
        let x = j as f64 + 0.5 - size as f64 / 2.0;
        let y = i as f64 + 0.5 - size as f64 / 2.0;
        let (c, s) = (content.rotation.cos(), content.rotation.sin());
        let u = x * c + y * s;
        let w = -x * s + y * c;
        (u / axes.0).powi(2) + (w / axes.1).powi(2) <= 1.0
    }

    #[test]
    fn render_is_deterministic() {
        let content = test_content(1);
        let a = render_phantom(&content, 0.0, 64).unwrap();
        let b = render_phantom(&content, 0.0, 64).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn render_rejects_out_of_range_phenotype() {
        let content = test_content(2);
        assert!(matches!(render_phantom(&content, 1.5, 64), Err(Error::Domain(_))));
        assert!(matches!(render_phantom(&content, -0.1, 64), Err(Error::Domain(_))));
    }

    #[test]
    fn ventricle_grows_with_phenotype() {
        // count dark pixels inside the inner ellipse via direct rasterization
        let content = test_content(3);
        let count_dark = |t: f64| -> usize {
            let img = render_phantom(&content, t, 64).unwrap();
            let tau = BAND_THICKNESS_T0 + (BAND_THICKNESS_T1 - BAND_THICKNESS_T0) * t;
            let inner = (content.ellipse_axes.0 - tau, content.ellipse_axes.1 - tau);
            let mut n = 0;
            for i in 0..64 {
                for j in 0..64 {
                    if inside_ellipse(i, j, &content, inner, 64) && img[[i, j]] < 0.2 {
                        n += 1;
                    }
                }
            }
            n
        };
        assert!(count_dark(0.9) > count_dark(0.1), "ventricle must grow with t");
    }

    #[test]
    fn band_thickness_matches_configuration_at_midpoint() {
        // axes at the lower bound, no rotation: measure the bright run along
        // the major axis at the mid phenotype, expected thickness 4 ± 1 px
        let content = ContentFactors {
            ellipse_axes: (16.0, 16.0),
            rotation: 0.0,
            base_intensity: 0.5,
            texture_seed: 7,
        };
        let img = render_phantom(&content, 0.5, 64).unwrap();
        let row = 32;
        let threshold = content.base_intensity as f32 + 0.125;
        let mut runs = Vec::new();
        let mut run = 0;
        for j in 0..64 {
            if img[[row, j]] > threshold {
                run += 1;
            } else if run > 0 {
                runs.push(run);
                run = 0;
            }
        }
        if run > 0 {
            runs.push(run);
        }
        assert_eq!(runs.len(), 2, "band crossed twice along the major axis: {runs:?}");
        let expected = BAND_THICKNESS_T0 + (BAND_THICKNESS_T1 - BAND_THICKNESS_T0) * 0.5;
        for r in runs {
            assert!(
                (r as f64 - expected).abs() <= 1.0,
                "band run {r} px vs expected {expected} ± 1"
            );
        }
    }

    #[test]
    fn monotone_region_geometry() {
        // 50 random contents × 11 phenotype steps: ventricle pixel count
        // non-decreasing, band pixel count non-increasing
        for c in 0..50 {
            let content = test_content(100 + c);
            let mut prev_vent = 0usize;
            let mut prev_band = usize::MAX;
            for k in 0..=10 {
                let t = k as f64 / 10.0;
                let (_, regions) = render_with_regions(&content, t, 64).unwrap();
                let vent = regions.ventricle.iter().filter(|&&b| b).count();
                let band = regions.band.iter().filter(|&&b| b).count();
                assert!(vent >= prev_vent, "ventricle shrank at content {c}, t={t}");
                assert!(band <= prev_band, "band grew at content {c}, t={t}");
                prev_vent = vent;
                prev_band = band;
            }
        }
    }

    #[test]
    fn lesions_identity_when_count_zero() {
        let content = test_content(4);
        let (img, regions) = render_with_regions(&content, 0.3, 64).unwrap();
        let mut rng = stream_rng(9, 0);
        let (out, mask) = add_punctate_lesions(&img, &regions.tissue, 0, 2.0, &mut rng).unwrap();
        assert_eq!(out, img);
        assert!(mask.iter().all(|&b| !b));
    }

    /// 4-connected component labelling used as the lesion-shape oracle.
    fn connected_components(mask: &Array2<bool>) -> Vec<usize> {
        let (h, w) = (mask.shape()[0], mask.shape()[1]);
        let mut seen = Array2::<bool>::from_elem((h, w), false);
        let mut sizes = Vec::new();
        for si in 0..h {
            for sj in 0..w {
                if !mask[[si, sj]] || seen[[si, sj]] {
                    continue;
                }
                let mut size = 0;
                let mut stack = vec![(si, sj)];
                seen[[si, sj]] = true;
                while let Some((i, j)) = stack.pop() {
                    size += 1;
                    let neighbours = [
                        (i.wrapping_sub(1), j),
                        (i + 1, j),
                        (i, j.wrapping_sub(1)),
                        (i, j + 1),
                    ];
                    for (ni, nj) in neighbours {
                        if ni < h && nj < w && mask[[ni, nj]] && !seen[[ni, nj]] {
                            seen[[ni, nj]] = true;
                            stack.push((ni, nj));
                        }
                    }
                }
                sizes.push(size);
            }
        }
        sizes
    }

    #[test]
    fn lesions_form_three_discs_of_expected_area() {
        let content = test_content(5);
        let (img, regions) = render_with_regions(&content, 0.8, 64).unwrap();
        let mut rng = stream_rng(10, 0);
        let (out, mask) = add_punctate_lesions(&img, &regions.tissue, 3, 2.0, &mut rng).unwrap();
        let sizes = connected_components(&mask);
        assert_eq!(sizes.len(), 3, "expected 3 separate lesions, got {sizes:?}");
        for s in sizes {
            assert!((9..=16).contains(&s), "lesion area {s} outside [9,16]");
        }
        // lesions brighten and stay inside tissue
        for i in 0..64 {
            for j in 0..64 {
                if mask[[i, j]] {
                    assert!(regions.tissue[[i, j]], "lesion outside tissue");
                    assert!(out[[i, j]] >= img[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn lesion_overflow_is_a_placement_error() {
        let content = test_content(6);
        let (img, regions) = render_with_regions(&content, 0.5, 64).unwrap();
        let mut rng = stream_rng(11, 0);
        let err = add_punctate_lesions(&img, &regions.tissue, 10_000, 2.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Placement { .. }));
    }

    #[test]
    fn gt_diff_zero_for_equal_phenotypes_and_outside_tissue() {
        let content = test_content(7);
        let same = make_pair_with_gt(&content, 0.4, 0.4, 64).unwrap();
        assert!(same.gt_diff.iter().all(|&v| v == 0.0));
        let pair = make_pair_with_gt(&content, 0.2, 0.8, 64).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                if !pair.tissue_mask[[i, j]] {
                    assert_eq!(pair.gt_diff[[i, j]], 0.0, "gt_diff nonzero outside tissue");
                }
            }
        }
    }

    #[test]
    fn gt_diff_mass_concentrates_in_changing_regions() {
        let content = test_content(8);
        let pair = make_pair_with_gt(&content, 0.2, 0.8, 64).unwrap();
        let (_, src_regions) = render_with_regions(&content, 0.2, 64).unwrap();
        let (_, ref_regions) = render_with_regions(&content, 0.8, 64).unwrap();
        // union of band+ventricle at both phenotypes, dilated by 1 px to
        // account for the renderer's 1-px boundary ramps
        let mut region = Array2::<bool>::from_elem((64, 64), false);
        for i in 0..64 {
            for j in 0..64 {
                region[[i, j]] = src_regions.band[[i, j]]
                    || ref_regions.band[[i, j]]
                    || src_regions.ventricle[[i, j]]
                    || ref_regions.ventricle[[i, j]];
            }
        }
        let mut dilated = region.clone();
        for i in 0..64usize {
            for j in 0..64usize {
                if region[[i, j]] {
                    continue;
                }
                let neighbours = [
                    (i.wrapping_sub(1), j),
                    (i + 1, j),
                    (i, j.wrapping_sub(1)),
                    (i, j + 1),
                ];
                if neighbours.iter().any(|&(a, b)| a < 64 && b < 64 && region[[a, b]]) {
                    dilated[[i, j]] = true;
                }
            }
        }
        let total: f64 = pair.gt_diff.iter().map(|&v| v.abs() as f64).sum();
        let inside: f64 = pair
            .gt_diff
            .indexed_iter()
            .filter(|((i, j), _)| dilated[[*i, *j]])
            .map(|(_, &v)| v.abs() as f64)
            .sum();
        assert!(total > 0.0);
        assert!(
            inside / total >= 0.9,
            "only {:.1}% of |gt_diff| mass inside changing regions",
            100.0 * inside / total
        );
    }

    #[test]
    fn gt_diff_sign_in_cortical_band() {
        // when the reference phenotype is larger the band dims: negative diff
        let content = test_content(9);
        let pair = make_pair_with_gt(&content, 0.1, 0.9, 64).unwrap();
        let (_, src_regions) = render_with_regions(&content, 0.1, 64).unwrap();
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for i in 0..64 {
            for j in 0..64 {
                if src_regions.band[[i, j]] {
                    sum += pair.gt_diff[[i, j]] as f64;
                    n += 1;
                }
            }
        }
        assert!(n > 0);
        let mean = sum / n as f64;
        assert!(mean < 0.0, "band diff should be negative, got {mean}");
    }

    #[test]
    fn gt_diff_is_antisymmetric_exactly() {
        let content = test_content(12);
        let fwd = make_pair_with_gt(&content, 0.25, 0.75, 64).unwrap();
        let bwd = make_pair_with_gt(&content, 0.75, 0.25, 64).unwrap();
        for (a, b) in fwd.gt_diff.iter().zip(bwd.gt_diff.iter()) {
            // exact IEEE negation (±0 compare equal)
            assert!(*a == -*b, "antisymmetry violated: {a} vs {b}");
        }
    }

    #[test]
    fn dataset_generation_is_bit_reproducible() {
        let config = PhantomConfig { n_samples: 12, ..Default::default() };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let man_a = generate_dataset(&config, 7, dir_a.path()).unwrap();
        let man_b = generate_dataset(&config, 7, dir_b.path()).unwrap();
        assert_eq!(man_a.generator_config_hash, man_b.generator_config_hash);
        for rec in &man_a.records {
            for p in [&rec.image_path, &rec.mask_path, &rec.gt_diff_path] {
                let a = std::fs::read(dir_a.path().join(p)).unwrap();
                let b = std::fs::read(dir_b.path().join(p)).unwrap();
                assert_eq!(a, b, "file {p} differs between identical runs");
            }
        }
        let ma = std::fs::read(dir_a.path().join("manifest.jsonl")).unwrap();
        let mb = std::fs::read(dir_b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let config = PhantomConfig { n_samples: 100, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&config, 3, dir.path()).unwrap();
        assert_eq!(manifest.split_len(Split::Train), 80);
        assert_eq!(manifest.split_len(Split::Val), 10);
        assert_eq!(manifest.split_len(Split::Test), 10);
        // classes stratified by parity stay balanced within each split
        let train_ones = manifest
            .split_records(Split::Train)
            .filter(|r| r.class_label == 1)
            .count();
        assert_eq!(train_ones, 40);
    }

    #[test]
    fn manifest_round_trips_and_validates() {
        let config = PhantomConfig { n_samples: 10, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let written = generate_dataset(&config, 5, dir.path()).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.records.len(), written.records.len());
        assert_eq!(loaded.generator_config_hash, written.generator_config_hash);
        let rec = load_record(dir.path(), &loaded.records[3]).unwrap();
        assert_eq!(rec.image.shape(), &[64, 64]);
        assert_eq!(rec.class_label, loaded.records[3].class_label);
        // class invariant: label matches phenotype threshold
        for r in &loaded.records {
            assert_eq!(r.class_label == 1, r.phenotype > 0.5);
        }
    }

    #[test]
    fn phenotype_histogram_is_uniform() {
        // marginal over stratified draws must be uniform on [0,1]
        let n = 10_000usize;
        let mut bins = [0usize; 10];
        for id in 0..n {
            let mut rng = stream_rng(42, id as u64 + 1);
            let (t, class) = sample_phenotype(&mut rng, id);
            assert_eq!(class == 1, t > 0.5);
            bins[((t * 10.0) as usize).min(9)] += 1;
        }
        // multinomial: each bin ~ Binomial(n, 0.1), 3σ = 3·sqrt(n·0.1·0.9) = 90
        for (i, &b) in bins.iter().enumerate() {
            assert!(
                (b as f64 - 1000.0).abs() <= 90.0,
                "bin {i} count {b} outside 1000 ± 90"
            );
        }
    }
}
