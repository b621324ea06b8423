//! Implementations of the `icam` subcommands.
//!
//! Every command follows the same shape: prepare the output directory
//! (refusing to clobber existing results unless `--force` is given), do the
//! work, and drop a `run_manifest.json` holding the exact arguments, seeds,
//! and config hash needed to reproduce the run.

use crate::config::RunConfig;
use icam_core::attribution::{
    attribute_single, embed_latents, interpolate, to_batch, translate_pair, EmbedMethod,
};
use icam_core::baselines::{
    gradcam_map, gradient_saliency_map, integrated_gradients_map, occlusion_map, train_baseline,
    DEFAULT_IG_STEPS, DEFAULT_OCCLUSION_BLOCK, DEFAULT_OCCLUSION_STRIDE, DEFAULT_OCCLUSION_VALUE,
};
use icam_core::evalmetrics::{
    evaluate_attribution, fa_phenotype_correlation, flip_test, regression_metrics, Direction,
    LabeledScore, MetricsReport,
};
use icam_core::export;
use icam_core::nets::{Model, Prediction};
use icam_core::rng::stream_rng;
use icam_core::synthdata::{generate_dataset, DatasetManifest, LoadedRecord, Split};
use icam_core::trainer::{fit, load_model};
use icam_core::{tensorfile, Error, Result};
use ndarray::Array2;
use serde::Serialize;
use serde_json::json;
use std::path::Path;

/// RNG stream ids for the analysis commands, disjoint from the generator
/// (1..), trainer (100..), embedding (200..), and baseline-training (300)
/// streams.
const RNG_STREAM_EVAL: u64 = 400;
const RNG_STREAM_ATTRIBUTE: u64 = 410;

/// Attempt budget for rejection sampling in the standalone `attribute`
/// command (`eval` takes its budget from the config's train section).
const REJECTION_MAX_ATTEMPTS: usize = 100;

/// Integrated gradients runs 200 forward/backward passes per subject, so the
/// eval command scores it on a fixed-size subject panel; the row's `n` column
/// records the cap.
const IG_EVAL_SUBJECTS: usize = 20;

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Create the output directory, refusing to reuse a non-empty one without
/// `--force`. Creation goes through `create_dir_all`, whose final `mkdir` is
/// atomic, so two racing commands cannot interleave partial results.
fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !force && std::fs::read_dir(out)?.next().is_some() {
            return Err(Error::Config(format!(
                "output directory {} already exists and is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    argv: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a RunConfig>,
    args: serde_json::Value,
    versions: serde_json::Value,
}

/// Record how this run was invoked: full argv, seed, resolved config (plus
/// its hash), and format versions. Replaying the manifest reproduces the run.
fn write_run_manifest(
    out: &Path,
    command: &'static str,
    seed: Option<u64>,
    config: Option<&RunConfig>,
    args: serde_json::Value,
) -> Result<()> {
    let manifest = RunManifest {
        command,
        argv: std::env::args().collect(),
        seed,
        config_sha256: config.map(RunConfig::sha256),
        config,
        args,
        versions: json!({
            "package": env!("CARGO_PKG_VERSION"),
            "tensor_format": String::from_utf8_lossy(tensorfile::MAGIC),
            "checkpoint_format": String::from_utf8_lossy(icam_core::checkpoint::MAGIC),
        }),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out.join("run_manifest.json"), text)?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Read a tensor file holding a single 2-d image.
fn read_image_2d(path: &Path) -> Result<Array2<f32>> {
    let tensor = tensorfile::read(path)?;
    let shape = tensor.shape().to_vec();
    tensor.into_dimensionality::<ndarray::Ix2>().map_err(|_| {
        Error::Format(format!(
            "{} holds a tensor of shape {:?}, expected a 2-d image",
            path.display(),
            shape
        ))
    })
}

fn write_tensor_2d(path: &Path, array: &Array2<f32>) -> Result<()> {
    tensorfile::write(path, &array.clone().into_dyn())
}

/// Batched class/regression predictions for a list of records.
fn predict_records(model: &Model<f32>, records: &[LoadedRecord]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(64) {
        let images: Vec<&Array2<f32>> = chunk.iter().map(|r| &r.image).collect();
        let attr = model.encode_attr_values(&to_batch(&images))?;
        out.extend(model.predict_values(&attr.mean)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

pub fn gen_data(
    config_path: Option<&Path>,
    seed_override: Option<u64>,
    out: &Path,
    force: bool,
) -> Result<()> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    prepare_out_dir(out, force)?;
    let manifest = generate_dataset(&config.data, config.seed, out)?;
    write_run_manifest(
        out,
        "gen-data",
        Some(config.seed),
        Some(&config),
        json!({ "out": out, "config_path": config_path }),
    )?;
    println!(
        "generated {} records ({} train / {} val / {} test) at {}",
        manifest.records.len(),
        manifest.split_len(Split::Train),
        manifest.split_len(Split::Val),
        manifest.split_len(Split::Test),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train(config_path: Option<&Path>, data: &Path, out: &Path, force: bool) -> Result<()> {
    let config = load_config(config_path)?;
    prepare_out_dir(out, force)?;
    write_run_manifest(
        out,
        "train",
        Some(config.train.seed),
        Some(&config),
        json!({ "data": data, "out": out, "config_path": config_path }),
    )?;
    let outcome = fit(data, config.model.clone(), &config.train, out)?;
    std::fs::write(out.join("fit_outcome.json"), serde_json::to_string_pretty(&outcome)?)?;
    println!("classification checkpoint: {}", outcome.classification_best.display());
    if let Some(path) = &outcome.regression_best {
        println!("regression checkpoint:     {}", path.display());
    }
    if let Some(ncc) = outcome.best_val_ncc {
        println!("best val NCC:  {ncc:.4}");
    }
    if let Some(mae) = outcome.best_val_mae {
        println!("best val MAE:  {mae:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// One subject or metric row dropped from the evaluation, written to
/// `skips.jsonl` instead of failing the whole run.
#[derive(Serialize)]
struct SkipRecord {
    stage: &'static str,
    /// Subject id for per-subject skips, `method/direction` for NCC rows.
    label: String,
    error: &'static str,
    message: String,
}

/// Append an NCC row, downgrading an all-degenerate method to a skip record:
/// a method that yields constant maps at this scale (so no subject has a
/// defined NCC) should not abort an otherwise healthy evaluation.
fn push_ncc_row(
    ncc: &mut Vec<LabeledScore>,
    skips: &mut Vec<SkipRecord>,
    method: &str,
    maps: &[Array2<f32>],
    gts: &[Array2<f32>],
    masks: &[Array2<bool>],
    direction: Direction,
) -> Result<()> {
    match evaluate_attribution(maps, gts, masks, direction) {
        Ok(score) => ncc.push(LabeledScore { method: method.into(), score }),
        Err(e @ Error::DegenerateInput(_)) => skips.push(SkipRecord {
            stage: "ncc",
            label: format!("{method}/{direction}"),
            error: e.kind(),
            message: e.to_string(),
        }),
        Err(e) => return Err(e),
    }
    Ok(())
}

pub fn eval(
    config_path: Option<&Path>,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    samples: usize,
    force: bool,
) -> Result<()> {
    let config = load_config(config_path)?;
    prepare_out_dir(out, force)?;
    write_run_manifest(
        out,
        "eval",
        Some(config.seed),
        Some(&config),
        json!({
            "checkpoint": checkpoint,
            "data": data,
            "out": out,
            "samples": samples,
            "config_path": config_path,
        }),
    )?;

    let model = load_model(checkpoint)?;
    let manifest = DatasetManifest::load(data)?;
    let test = manifest.load_split(data, Split::Test)?;
    if test.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n_test = test.len();
    println!("evaluating {n_test} test subjects against {}", checkpoint.display());

    // Plain predictions on the untouched test images.
    let predictions = predict_records(&model, &test)?;
    let correct = test
        .iter()
        .zip(&predictions)
        .filter(|(r, p)| (p.class_logit >= 0.0) as u8 == r.class_label)
        .count();
    let accuracy = Some(correct as f64 / n_test as f64);
    let pred_phenotypes: Vec<f64> = predictions.iter().map(|p| p.regression_value).collect();
    let true_phenotypes: Vec<f64> = test.iter().map(|r| r.phenotype).collect();
    let regression = if n_test >= 3 {
        Some(regression_metrics(&pred_phenotypes, &true_phenotypes)?)
    } else {
        None
    };

    // The independent classifier: same encoder architecture, trained from
    // scratch on the training split only. It referees the flip test and
    // supplies the gradient/occlusion attribution baselines.
    println!("training the independent classifier on the train split...");
    let train_records = manifest.load_split(data, Split::Train)?;
    let cnn = train_baseline(&train_records, config.model.clone(), &config.baseline)?;
    cnn.save(&out.join("independent_classifier.ckpt"))?;

    // Per-subject FA maps by translating each test image toward the opposite
    // class. Subjects whose rejection sampling exhausts its budget become
    // skip records, not failures.
    println!("computing FA maps ({samples} attribute samples per subject)...");
    let fa_dir = out.join("fa");
    std::fs::create_dir_all(&fa_dir)?;
    let mut rng = stream_rng(config.seed, RNG_STREAM_EVAL);
    let mut fa_maps: Vec<Option<Array2<f32>>> = Vec::with_capacity(n_test);
    let mut skips: Vec<SkipRecord> = Vec::new();
    for record in &test {
        let target = 1 - record.class_label;
        match attribute_single(
            &model,
            &record.image,
            target,
            samples,
            config.train.rejection_max_attempts,
            &mut rng,
        ) {
            Ok(stats) => {
                write_tensor_2d(&fa_dir.join(format!("{:05}.tns", record.id)), &stats.mean_map)?;
                fa_maps.push(Some(stats.mean_map));
            }
            Err(e @ Error::RejectionExhausted { .. }) => {
                skips.push(SkipRecord {
                    stage: "attribute",
                    label: record.id.to_string(),
                    error: e.kind(),
                    message: e.to_string(),
                });
                fa_maps.push(None);
            }
            Err(e) => return Err(e),
        }
    }

    // NCC table. Direction − scores the class-1 → 0 translations against the
    // ground-truth difference maps; direction + the reverse. The attribution
    // baselines explain the independent classifier's logit, so they are
    // scored on the class-1 subjects, where the phenotype evidence lives.
    let mut ncc: Vec<LabeledScore> = Vec::new();
    for (direction, source_class) in [(Direction::Neg, 1u8), (Direction::Pos, 0u8)] {
        let mut maps = Vec::new();
        let mut gts = Vec::new();
        let mut masks = Vec::new();
        for (record, map) in test.iter().zip(&fa_maps) {
            if record.class_label == source_class {
                if let Some(m) = map {
                    maps.push(m.clone());
                    gts.push(record.gt_diff.clone());
                    masks.push(record.tissue_mask.clone());
                }
            }
        }
        if maps.is_empty() {
            continue;
        }
        push_ncc_row(&mut ncc, &mut skips, "icam", &maps, &gts, &masks, direction)?;
    }

    let class1: Vec<&LoadedRecord> = test.iter().filter(|r| r.class_label == 1).collect();
    if !class1.is_empty() {
        println!("scoring attribution baselines on {} class-1 subjects...", class1.len());
        let gts: Vec<Array2<f32>> = class1.iter().map(|r| r.gt_diff.clone()).collect();
        let masks: Vec<Array2<bool>> = class1.iter().map(|r| r.tissue_mask.clone()).collect();

        let mut occlusion = Vec::new();
        let mut gradcam = Vec::new();
        let mut saliency = Vec::new();
        for r in &class1 {
            occlusion.push(occlusion_map(
                &cnn,
                &r.image,
                DEFAULT_OCCLUSION_BLOCK,
                DEFAULT_OCCLUSION_STRIDE,
                DEFAULT_OCCLUSION_VALUE,
            )?);
            gradcam.push(gradcam_map(&cnn, &r.image)?);
            saliency.push(gradient_saliency_map(&cnn, &r.image)?);
        }
        let ig_panel = &class1[..class1.len().min(IG_EVAL_SUBJECTS)];
        let mut ig = Vec::new();
        for r in ig_panel {
            let baseline = Array2::<f32>::zeros(r.image.dim());
            ig.push(integrated_gradients_map(&cnn, &r.image, &baseline, DEFAULT_IG_STEPS)?);
        }

        for (method, maps, n) in [
            ("occlusion", &occlusion, class1.len()),
            ("integrated_gradients", &ig, ig_panel.len()),
            ("gradcam", &gradcam, class1.len()),
            ("saliency", &saliency, class1.len()),
        ] {
            push_ncc_row(&mut ncc, &mut skips, method, maps, &gts[..n], &masks[..n], Direction::Neg)?;
        }
    }

    // Flip test: add each subject's mean FA map to its image and ask the
    // independent classifier whether the result reads as the target class.
    // The same classifier on the raw test images is the reference row.
    let mut flip_images = Vec::new();
    let mut flip_targets = Vec::new();
    for (record, map) in test.iter().zip(&fa_maps) {
        if let Some(m) = map {
            flip_images.push(&record.image + m);
            flip_targets.push(1 - record.class_label);
        }
    }
    let flip = Some(flip_test(|img| cnn.class_probability(img), &flip_images, &flip_targets)?);
    let real_images: Vec<Array2<f32>> = test.iter().map(|r| r.image.clone()).collect();
    let real_labels: Vec<u8> = test.iter().map(|r| r.class_label).collect();
    let real_flip_reference =
        Some(flip_test(|img| cnn.class_probability(img), &real_images, &real_labels)?);

    // Mean |FA| inside the tissue mask, against predicted and true phenotype.
    let mut fa_means = Vec::new();
    let mut fa_pred = Vec::new();
    let mut fa_true = Vec::new();
    for ((record, map), prediction) in test.iter().zip(&fa_maps).zip(&predictions) {
        if let Some(m) = map {
            let (sum, count) = record
                .tissue_mask
                .iter()
                .zip(m.iter())
                .filter(|(inside, _)| **inside)
                .fold((0.0f64, 0usize), |(s, c), (_, v)| (s + v.abs() as f64, c + 1));
            if count > 0 {
                fa_means.push(sum / count as f64);
                fa_pred.push(prediction.regression_value);
                fa_true.push(record.phenotype);
            }
        }
    }
    let fa_correlation = if fa_means.len() >= 3 {
        Some(fa_phenotype_correlation(&fa_means, &fa_pred, &fa_true)?)
    } else {
        None
    };

    let report = MetricsReport {
        n_test,
        accuracy,
        ncc,
        regression,
        flip,
        real_flip_reference,
        fa_correlation,
    };
    std::fs::write(out.join("metrics.csv"), report.to_csv())?;
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    let table = report.render_table();
    std::fs::write(out.join("metrics.txt"), &table)?;
    if !skips.is_empty() {
        let mut lines = String::new();
        for skip in &skips {
            lines.push_str(&serde_json::to_string(skip)?);
            lines.push('\n');
        }
        std::fs::write(out.join("skips.jsonl"), lines)?;
        println!("skipped {} subject(s); see skips.jsonl", skips.len());
    }
    println!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// translate
// ---------------------------------------------------------------------------

pub fn translate(
    checkpoint: &Path,
    image_a: &Path,
    image_b: &Path,
    out: &Path,
    force: bool,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let x = read_image_2d(image_a)?;
    let y = read_image_2d(image_b)?;
    prepare_out_dir(out, force)?;
    write_run_manifest(
        out,
        "translate",
        None,
        None,
        json!({ "checkpoint": checkpoint, "image_a": image_a, "image_b": image_b, "out": out }),
    )?;
    let bundle = translate_pair(&model, &x, &y)?;
    let images: [(&str, &Array2<f32>); 8] = [
        ("x", &bundle.x),
        ("y", &bundle.y),
        ("x_hat", &bundle.x_hat),
        ("y_hat", &bundle.y_hat),
        ("v", &bundle.v),
        ("mu", &bundle.mu),
        ("x_cc", &bundle.x_cc),
        ("y_cc", &bundle.y_cc),
    ];
    for (name, array) in images {
        write_tensor_2d(&out.join(format!("{name}.tns")), array)?;
        export::grayscale_png(array, &out.join(format!("{name}.png")))?;
    }
    for (name, map) in [("m_x", &bundle.m_x), ("m_y", &bundle.m_y)] {
        write_tensor_2d(&out.join(format!("{name}.tns")), map)?;
        export::heatmap_png(map, &out.join(format!("{name}.png")))?;
    }
    println!("translation bundle written to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// attribute
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn attribute(
    checkpoint: &Path,
    image: &Path,
    target_class: u8,
    samples: usize,
    seed: u64,
    out: &Path,
    force: bool,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let x = read_image_2d(image)?;
    prepare_out_dir(out, force)?;
    write_run_manifest(
        out,
        "attribute",
        Some(seed),
        None,
        json!({
            "checkpoint": checkpoint,
            "image": image,
            "target_class": target_class,
            "samples": samples,
            "out": out,
        }),
    )?;
    let mut rng = stream_rng(seed, RNG_STREAM_ATTRIBUTE);
    let stats =
        attribute_single(&model, &x, target_class, samples, REJECTION_MAX_ATTEMPTS, &mut rng)?;
    write_tensor_2d(&out.join("mean_fa.tns"), &stats.mean_map)?;
    write_tensor_2d(&out.join("var_fa.tns"), &stats.var_map)?;
    export::heatmap_png(&stats.mean_map, &out.join("mean_fa.png"))?;
    export::heatmap_png(&stats.var_map, &out.join("var_fa.png"))?;
    let mut csv = String::from("sample,class_logit,regression\n");
    for (k, p) in stats.predictions.iter().enumerate() {
        csv.push_str(&format!("{k},{},{}\n", p.class_logit, p.regression_value));
    }
    std::fs::write(out.join("samples.csv"), csv)?;
    println!(
        "FA map over {} samples written to {} (mean logit {:.3})",
        stats.n_samples,
        out.display(),
        stats.predictions.iter().map(|p| p.class_logit).sum::<f64>()
            / stats.predictions.len() as f64,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// interpolate
// ---------------------------------------------------------------------------

pub fn interpolate_cmd(
    checkpoint: &Path,
    image_a: &Path,
    image_b: &Path,
    steps: usize,
    out: &Path,
    force: bool,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let x = read_image_2d(image_a)?;
    let y = read_image_2d(image_b)?;
    prepare_out_dir(out, force)?;
    write_run_manifest(
        out,
        "interpolate",
        None,
        None,
        json!({
            "checkpoint": checkpoint,
            "image_a": image_a,
            "image_b": image_b,
            "steps": steps,
            "out": out,
        }),
    )?;
    let path = interpolate(&model, &x, &y, steps)?;
    for (k, step) in path.iter().enumerate() {
        write_tensor_2d(&out.join(format!("step_{k:02}.tns")), &step.image)?;
        export::grayscale_png(&step.image, &out.join(format!("step_{k:02}.png")))?;
        write_tensor_2d(&out.join(format!("fa_{k:02}.tns")), &step.fa_map)?;
        export::heatmap_png(&step.fa_map, &out.join(format!("fa_{k:02}.png")))?;
    }
    std::fs::write(out.join("predictions.csv"), export::interpolation_csv(&path))?;
    println!("{} interpolation steps written to {}", path.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// embed
// ---------------------------------------------------------------------------

pub fn embed(
    checkpoint: &Path,
    data: &Path,
    method: EmbedMethod,
    split: Split,
    seed: u64,
    out: &Path,
    force: bool,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let manifest = DatasetManifest::load(data)?;
    let records = manifest.load_split(data, split)?;
    prepare_out_dir(out, force)?;
    write_run_manifest(
        out,
        "embed",
        Some(seed),
        None,
        json!({
            "checkpoint": checkpoint,
            "data": data,
            "method": method,
            "split": split.to_string(),
            "out": out,
        }),
    )?;
    let points = embed_latents(&model, &records, method, seed)?;
    std::fs::write(out.join("embedding.csv"), export::embedding_csv(&points))?;
    println!("embedded {} subjects to {}", points.len(), out.join("embedding.csv").display());
    Ok(())
}
