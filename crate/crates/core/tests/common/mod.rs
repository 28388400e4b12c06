//! Independent oracles and instance generators shared by the integration
//! tests. The oracles use plain index loops so they share no code with the
//! library beyond the matrix container.

#![allow(dead_code)]

use mgclip::data::{EmbeddingTable, Modality};
use mgclip::encoder::{batch_objective, DualEncoder, EncoderConfig, Objective, ParamScope};
use mgclip::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Random unit-row table with every class in `0..k` present at least once.
pub fn random_table(rng: &mut ChaCha8Rng, n: usize, k: usize, dim: usize, modality: Modality) -> EmbeddingTable {
    let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    EmbeddingTable::from_unnormalized(&gaussian(rng, n, dim), labels, modality).unwrap()
}

pub fn text_table(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> EmbeddingTable {
    EmbeddingTable::from_unnormalized(&gaussian(rng, k, dim), (0..k).collect(), Modality::Text).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// (pos, neg, inter-modality mean) by direct summation. Text row `j` is
/// class `j`.
pub fn brute_gap(images: &EmbeddingTable, texts: &EmbeddingTable) -> (f64, f64, f64) {
    let n = images.len();
    let k = texts.len();
    let (mut pos, mut neg, mut all) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let x = images.row(i);
        let y = images.labels()[i];
        let mut neg_i = 0.0;
        let mut all_i = 0.0;
        let mut pos_i = 0.0;
        for j in 0..k {
            let t = texts.row(j);
            let c = dot(x, t) / (norm(x) * norm(t));
            if j == y {
                pos_i = c;
            } else {
                neg_i += c;
            }
            all_i += c;
        }
        pos += pos_i;
        neg += neg_i / (k - 1) as f64;
        all += all_i / k as f64;
    }
    (pos / n as f64, neg / n as f64, all / n as f64)
}

/// Mean over source columns of `|x - B Bᵀ x|`.
pub fn brute_coverage(source: &Matrix, target: &Matrix) -> f64 {
    let d = source.rows();
    let mut total = 0.0;
    for c in 0..source.cols() {
        let x: Vec<f64> = (0..d).map(|r| source[(r, c)]).collect();
        let mut coeffs = vec![0.0; target.cols()];
        for r in 0..d {
            for j in 0..target.cols() {
                coeffs[j] += x[r] * target[(r, j)];
            }
        }
        let mut resid = vec![0.0; d];
        for r in 0..d {
            let mut p = 0.0;
            for j in 0..target.cols() {
                p += target[(r, j)] * coeffs[j];
            }
            resid[r] = x[r] - p;
        }
        total += norm(&resid);
    }
    total / source.cols() as f64
}

/// Normalized class mean of the rows labelled `class`.
pub fn brute_prototype(features: &EmbeddingTable, class: usize) -> Vec<f64> {
    let dim = features.dim();
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for i in 0..features.len() {
        if features.labels()[i] == class {
            for r in 0..dim {
                mean[r] += features.row(i)[r];
            }
            count += 1;
        }
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let n = norm(&mean);
    mean.iter().map(|m| m / n).collect()
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Largest relative error between `analytic` and central differences of `f`
/// around `x`. Coordinates where both sides are below `floor` count as
/// agreeing.
pub fn max_relative_error(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let floor = 1e-7;
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + FD_STEP;
        let up = f(&probe);
        probe[i] = x[i] - FD_STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * FD_STEP);
        let scale = analytic[i].abs().max(numeric.abs());
        if scale < floor {
            continue;
        }
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

/// Small encoder with random adapters and a moderate logit scale.
pub fn small_encoder(seed: u64) -> DualEncoder {
    let mut enc = DualEncoder::new(EncoderConfig::new(5, 4, 3, seed)).unwrap();
    enc.logit_scale = 4.0;
    enc.attach_adapters(2, seed + 1).unwrap();
    let mut r = rng(seed + 2);
    let n = enc.params(ParamScope::Adapters).len();
    let values: Vec<f64> = (0..n).map(|_| 0.3 * r.sample::<f64, _>(StandardNormal)).collect();
    enc.set_params(ParamScope::Adapters, &values);
    enc
}

/// Worst relative error of the analytic gradient of `objective` in `scope`.
pub fn encoder_gradient_error(
    enc: &DualEncoder,
    raw_image: &Matrix,
    raw_text: &Matrix,
    objective: Objective<'_>,
    scope: ParamScope,
) -> f64 {
    let x = enc.params(scope);
    let (_, analytic) = batch_objective(enc, raw_image, raw_text, objective, scope).unwrap();
    let mut probe = enc.clone();
    let mut f = |p: &[f64]| {
        probe.set_params(scope, p);
        batch_objective(&probe, raw_image, raw_text, objective, scope).unwrap().0
    };
    max_relative_error(&mut f, &x, &analytic)
}
