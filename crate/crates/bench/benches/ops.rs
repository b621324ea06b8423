//! Criterion benches over the pipeline's hot paths: phantom rendering, the
//! encoder conv stack (forward and forward+backward), full pair translation,
//! NCC, t-SNE, and tensor-file round trips.

use criterion::{criterion_group, criterion_main, Criterion};
use icam_core::attribution::{to_batch, translate_pair};
use icam_core::baselines::{BaselineCNN, ImageScorer};
use icam_core::embed::tsne;
use icam_core::evalmetrics::ncc;
use icam_core::nets::{Model, ModelConfig};
use icam_core::rng::stream_rng;
use icam_core::synthdata::{render_phantom, ContentFactors};
use icam_core::tensorfile;
use ndarray::{Array2, ArrayD};
use rand::Rng;
use std::hint::black_box;

fn random_image(seed: u64, size: usize) -> Array2<f32> {
    let mut rng = stream_rng(seed, 0);
    Array2::from_shape_simple_fn((size, size), || rng.gen_range(0.0..1.0))
}

fn bench_render_phantom(c: &mut Criterion) {
    let mut rng = stream_rng(7, 1);
    let content = ContentFactors::sample(&mut rng, 64);
    c.bench_function("render_phantom_64", |b| {
        b.iter(|| render_phantom(black_box(&content), black_box(0.35), 64).unwrap())
    });
}

fn bench_ncc(c: &mut Criterion) {
    let a = random_image(1, 64);
    let b_img = random_image(2, 64);
    let mask = Array2::from_elem((64, 64), true);
    c.bench_function("ncc_64", |b| {
        b.iter(|| ncc(black_box(&a), black_box(&b_img), black_box(&mask)).unwrap())
    });
}

fn bench_encoder_forward(c: &mut Criterion) {
    let model = Model::<f32>::init(ModelConfig::default()).unwrap();
    let images: Vec<Array2<f32>> = (0..4).map(|k| random_image(10 + k, 64)).collect();
    let batch: ArrayD<f32> = to_batch(&images.iter().collect::<Vec<_>>());
    c.bench_function("encode_attr_forward_batch4", |b| {
        b.iter(|| model.encode_attr_values(black_box(&batch)).unwrap())
    });
}

fn bench_encoder_forward_backward(c: &mut Criterion) {
    let cnn = BaselineCNN { model: Model::init(ModelConfig::default()).unwrap() };
    let images: Vec<Array2<f32>> = (0..4).map(|k| random_image(20 + k, 64)).collect();
    let batch: ArrayD<f32> = to_batch(&images.iter().collect::<Vec<_>>());
    c.bench_function("classifier_grad_batch4", |b| {
        b.iter(|| cnn.grad_batch(black_box(&batch)).unwrap())
    });
}

fn bench_translate_pair(c: &mut Criterion) {
    let model = Model::<f32>::init(ModelConfig::default()).unwrap();
    let x = random_image(30, 64);
    let y = random_image(31, 64);
    c.bench_function("translate_pair_64", |b| {
        b.iter(|| translate_pair(black_box(&model), black_box(&x), black_box(&y)).unwrap())
    });
}

fn bench_tsne(c: &mut Criterion) {
    let mut rng = stream_rng(5, 0);
    let data = Array2::from_shape_simple_fn((96, 8), || rng.gen_range(-1.0..1.0));
    c.bench_function("tsne_96x8", |b| b.iter(|| tsne(black_box(&data), 3).unwrap()));
}

fn bench_tensorfile_round_trip(c: &mut Criterion) {
    let mut rng = stream_rng(6, 0);
    let tensor = ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[2, 64, 64]), || {
        rng.gen_range(-1.0f32..1.0)
    });
    c.bench_function("tensorfile_encode_decode_2x64x64", |b| {
        b.iter(|| tensorfile::decode(&tensorfile::encode(black_box(&tensor)).unwrap()).unwrap())
    });
}

fn config() -> Criterion {
    Criterion::default().sample_size(10)
}

criterion_group! {
    name = benches;
    config = config();
    targets = bench_render_phantom,
        bench_ncc,
        bench_encoder_forward,
        bench_encoder_forward_backward,
        bench_translate_pair,
        bench_tsne,
        bench_tensorfile_round_trip
}
criterion_main!(benches);
