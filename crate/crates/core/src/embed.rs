//! 2-D embeddings of attribute latents: exact (O(n²)) tSNE and PCA.

use crate::error::{Error, Result};
use crate::rng::{normal_f64, stream_rng};
use ndarray::{Array1, Array2, Axis};

/// Exact tSNE is quadratic in the dataset size; refuse anything larger.
pub const TSNE_MAX_POINTS: usize = 2000;
pub const TSNE_PERPLEXITY: f64 = 30.0;
pub const TSNE_ITERATIONS: usize = 1000;
const EARLY_EXAGGERATION: f64 = 12.0;
const EARLY_PHASE_ITERATIONS: usize = 250;
const LEARNING_RATE: f64 = 200.0;
const MOMENTUM_EARLY: f64 = 0.5;
const MOMENTUM_LATE: f64 = 0.8;
const MIN_GAIN: f64 = 0.01;
const MIN_PROBABILITY: f64 = 1e-12;
const RNG_STREAM_TSNE: u64 = 200;

/// Project rows of `data` onto their top two principal components.
/// With a single feature column the second coordinate is zero.
pub fn pca_2d(data: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = data.dim();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    if d == 0 {
        return Err(Error::Contract("PCA input has no feature columns".into()));
    }
    let mean = data.mean_axis(Axis(0)).expect("n >= 2");
    let centered = data - &mean.insert_axis(Axis(0));

    let cov = nalgebra::DMatrix::from_fn(d, d, |i, j| {
        centered.column(i).dot(&centered.column(j)) / (n as f64 - 1.0)
    });
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut out = Array2::<f64>::zeros((n, 2));
    for (axis, &col) in order.iter().take(2).enumerate() {
        let component: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        for (i, row) in centered.axis_iter(Axis(0)).enumerate() {
            out[[i, axis]] = row
                .iter()
                .zip(&component)
                .map(|(&x, &v)| x * v)
                .sum::<f64>();
        }
    }
    Ok(out)
}

/// Squared Euclidean distances between all row pairs.
fn pairwise_sq_dists(data: &Array2<f64>) -> Array2<f64> {
    let n = data.nrows();
    let mut d2 = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = data
                .row(i)
                .iter()
                .zip(data.row(j))
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            d2[[i, j]] = dist;
            d2[[j, i]] = dist;
        }
    }
    d2
}

/// Conditional distribution `p_{j|i}` for one row via binary search on the
/// Gaussian precision so the entropy matches `ln(perplexity)`.
fn conditional_probabilities(d2_row: &[f64], i: usize, perplexity: f64) -> Vec<f64> {
    let n = d2_row.len();
    let target_entropy = perplexity.ln();
    let mut beta = 1.0;
    let mut beta_min = f64::NEG_INFINITY;
    let mut beta_max = f64::INFINITY;
    let mut p = vec![0.0; n];
    for _ in 0..50 {
        let mut sum_p = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-beta * d2_row[j]).exp() };
            sum_p += p[j];
        }
        if sum_p <= 0.0 {
            // precision too high for this row's scale; soften and retry
            beta_max = beta;
            beta = if beta_min.is_finite() { 0.5 * (beta + beta_min) } else { beta / 2.0 };
            continue;
        }
        let sum_dp: f64 = (0..n).map(|j| d2_row[j] * p[j]).sum();
        let entropy = sum_p.ln() + beta * sum_dp / sum_p;
        for v in &mut p {
            *v /= sum_p;
        }
        let diff = entropy - target_entropy;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            beta_min = beta;
            beta = if beta_max.is_finite() { 0.5 * (beta + beta_max) } else { beta * 2.0 };
        } else {
            beta_max = beta;
            beta = if beta_min.is_finite() { 0.5 * (beta + beta_min) } else { beta / 2.0 };
        }
    }
    p
}

/// Exact symmetric tSNE to two dimensions: perplexity-calibrated Gaussian
/// affinities, Student-t low-dimensional kernel, gradient descent with early
/// exaggeration and per-coordinate gains. Deterministic for a given seed.
pub fn tsne(data: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
    let n = data.nrows();
    if n < 5 {
        return Err(Error::InsufficientData { needed: 5, got: n });
    }
    if n > TSNE_MAX_POINTS {
        return Err(Error::Contract(format!(
            "exact tSNE is limited to {TSNE_MAX_POINTS} points, got {n}"
        )));
    }
    // the entropy target is unattainable when the perplexity approaches the
    // number of neighbours; cap it the standard way for small datasets
    let perplexity = TSNE_PERPLEXITY.min((n as f64 - 1.0) / 3.0);

    let d2 = pairwise_sq_dists(data);
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let row = conditional_probabilities(d2.row(i).as_slice().expect("contiguous"), i, perplexity);
        for j in 0..n {
            p[[i, j]] = row[j];
        }
    }
    // symmetrize and normalize over all pairs
    let mut p_sym = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            p_sym[[i, j]] = ((p[[i, j]] + p[[j, i]]) / (2.0 * n as f64)).max(MIN_PROBABILITY);
        }
        p_sym[[i, i]] = MIN_PROBABILITY;
    }

    let mut rng = stream_rng(seed, RNG_STREAM_TSNE);
    let mut y = Array2::<f64>::zeros((n, 2));
    for v in y.iter_mut() {
        *v = normal_f64(&mut rng) * 1e-4;
    }
    let mut increments = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::from_elem((n, 2), 1.0);

    for iteration in 0..TSNE_ITERATIONS {
        let exaggeration =
            if iteration < EARLY_PHASE_ITERATIONS { EARLY_EXAGGERATION } else { 1.0 };
        let momentum =
            if iteration < EARLY_PHASE_ITERATIONS { MOMENTUM_EARLY } else { MOMENTUM_LATE };

        // Student-t kernel numerators and their total
        let mut num = Array2::<f64>::zeros((n, n));
        let mut num_sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dy0 = y[[i, 0]] - y[[j, 0]];
                let dy1 = y[[i, 1]] - y[[j, 1]];
                let k = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                num[[i, j]] = k;
                num[[j, i]] = k;
                num_sum += 2.0 * k;
            }
        }

        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            let mut g0 = 0.0;
            let mut g1 = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / num_sum).max(MIN_PROBABILITY);
                let mult = (exaggeration * p_sym[[i, j]] - q) * num[[i, j]];
                g0 += mult * (y[[i, 0]] - y[[j, 0]]);
                g1 += mult * (y[[i, 1]] - y[[j, 1]]);
            }
            grad[[i, 0]] = 4.0 * g0;
            grad[[i, 1]] = 4.0 * g1;
        }

        for i in 0..n {
            for a in 0..2 {
                let same_direction = grad[[i, a]].signum() == increments[[i, a]].signum();
                gains[[i, a]] = if same_direction {
                    (gains[[i, a]] * 0.8).max(MIN_GAIN)
                } else {
                    gains[[i, a]] + 0.2
                };
                increments[[i, a]] =
                    momentum * increments[[i, a]] - LEARNING_RATE * gains[[i, a]] * grad[[i, a]];
                y[[i, a]] += increments[[i, a]];
            }
        }
        let mean: Array1<f64> = y.mean_axis(Axis(0)).expect("n >= 5");
        for i in 0..n {
            y[[i, 0]] -= mean[0];
            y[[i, 1]] -= mean[1];
        }
    }
    Ok(y)
}
