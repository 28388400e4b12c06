//! Two-cone synthetic data.
//!
//! Every class gets a text anchor and an image anchor built from one random
//! orthonormal frame: a shared axis `s`, a modality axis `m` (added for text,
//! subtracted for images) and one direction `c_k` per class. With squared
//! weights `w_s + w_m + w_c = 1` the anchor cosines are
//!
//! ```text
//! cos(x_k, t_j) = w_s - w_m + w_c * [k == j]
//! ```
//!
//! so the inter-modality mean is `w_s - w_m + w_c / K`. Image samples are the
//! anchor plus `spread * u` (u a random unit vector orthogonal to both `s` and
//! `m`), renormalized; the anchor mean is inflated by `sqrt(1 + spread^2)` to
//! cancel the expected shrinkage.
//!
//! Raw encoder inputs are fixed random linear mixes of the reference
//! embeddings (one mixing matrix per modality) plus Gaussian noise.
//!
//! A separate pretraining corpus is drawn from the same anchors and rendered
//! through the unperturbed image mixing matrix. The downstream images go
//! through a mixing matrix perturbed by `domain_shift`, so a model pretrained
//! on the corpus meets them with a distribution shift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmbeddingTable, Modality};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, qr_basis, Matrix};

/// Fraction of the available budget (`min(1 + M, 1 - M)`) spent on the class
/// directions.
const CLASS_WEIGHT_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub raw_dim: usize,
    /// Target inter-modality mean cosine is `1 - cone_separation`.
    pub cone_separation: f64,
    pub intra_class_spread: f64,
    pub seed: u64,
    /// Standard deviation of the per-input noise added to raw inputs.
    pub input_noise: f64,
    /// Relative size of the perturbation applied to the downstream image
    /// mixing matrix.
    pub domain_shift: f64,
    /// Size of a per-class offset added to downstream raw images.
    pub class_shift: f64,
    pub pretrain_samples_per_class: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 50,
            raw_dim: 32,
            cone_separation: 0.8,
            intra_class_spread: 1.0,
            seed: 7,
            input_noise: 0.5,
            domain_shift: 0.5,
            class_shift: 0.25,
            pretrain_samples_per_class: 50,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        if self.samples_per_class < 1 {
            return Err(Error::InvalidConfig("samples_per_class must be at least 1".into()));
        }
        if self.raw_dim < self.num_classes {
            return Err(Error::InvalidConfig("raw_dim must be at least num_classes".into()));
        }
        if !(0.0..=2.0).contains(&self.cone_separation) {
            return Err(Error::InvalidConfig("cone_separation must lie in [0, 2]".into()));
        }
        if !(self.intra_class_spread > 0.0) || !self.intra_class_spread.is_finite() {
            return Err(Error::InvalidConfig("intra_class_spread must be positive".into()));
        }
        if !(self.input_noise >= 0.0) || !self.input_noise.is_finite() {
            return Err(Error::InvalidConfig("input_noise must be non-negative".into()));
        }
        if !(self.domain_shift >= 0.0) || !self.domain_shift.is_finite() {
            return Err(Error::InvalidConfig("domain_shift must be non-negative".into()));
        }
        if self.pretrain_samples_per_class < 1 {
            return Err(Error::InvalidConfig("pretrain_samples_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`]. Rows are class-major: class 0's samples
/// first. `text` and `raw_text` have one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub image: EmbeddingTable,
    pub text: EmbeddingTable,
    /// Downstream inputs, rendered with the shifted mixing matrix.
    pub raw_image: Matrix,
    pub raw_text: Matrix,
    pub pretrain_raw_image: Matrix,
    pub pretrain_labels: Vec<usize>,
}

const STREAM_PRETRAIN: u64 = 1;
const STREAM_SHIFT: u64 = 2;

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let k = cfg.num_classes;
    let d = cfg.raw_dim;
    if d < k + 2 {
        return Err(Error::InfeasibleGeometry(format!(
            "{k} classes need raw_dim >= {} (shared axis, modality axis, one axis per class), got {d}",
            k + 2
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let frame = qr_basis(&gaussian(&mut rng, d, d, 1.0))?;
    let axis = |j: usize| frame.column(j);
    let shared = axis(0);
    let modal = axis(1);

    let sigma = cfg.intra_class_spread;
    let target = 1.0 - cfg.cone_separation;
    let anchor_mean = (target * (1.0 + sigma * sigma).sqrt()).clamp(-1.0, 1.0);
    let w_c = CLASS_WEIGHT_FRACTION * (1.0 + anchor_mean).min(1.0 - anchor_mean);
    let kf = k as f64;
    let w_s = ((1.0 - w_c + anchor_mean - w_c / kf) / 2.0).max(0.0);
    let w_m = ((1.0 - w_c - anchor_mean + w_c / kf) / 2.0).max(0.0);
    let (a_s, a_m, a_c) = (w_s.sqrt(), w_m.sqrt(), w_c.sqrt());

    let mut text_rows = Vec::with_capacity(k);
    let mut image_anchors = Vec::with_capacity(k);
    for class in 0..k {
        let c = axis(2 + class);
        let t: Vec<f64> = (0..d).map(|i| a_s * shared[i] + a_m * modal[i] + a_c * c[i]).collect();
        let x: Vec<f64> = (0..d).map(|i| a_s * shared[i] - a_m * modal[i] + a_c * c[i]).collect();
        text_rows.push(unit(t));
        image_anchors.push(unit(x));
    }

    let (image_rows, labels) = sample_images(&mut rng, &image_anchors, cfg.samples_per_class, sigma, &shared, &modal);
    let image_ref = Matrix::from_rows(&image_rows)?;
    let text_ref = Matrix::from_rows(&text_rows)?;

    let scale = 1.0 / (d as f64).sqrt();
    let mix_image = gaussian(&mut rng, d, d, scale);
    let mix_text = gaussian(&mut rng, d, d, scale);
    let noise_scale = cfg.input_noise * scale;

    let mut shift_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shift_rng.set_stream(STREAM_SHIFT);
    let shifted = mix_image.add(&gaussian(&mut shift_rng, d, d, cfg.domain_shift * scale));
    let mut raw_image = image_ref.matmul_t(&shifted);
    let offsets = gaussian(&mut shift_rng, k, d, cfg.class_shift * scale);
    for (r, &class) in labels.iter().enumerate() {
        for (v, o) in raw_image.row_mut(r).iter_mut().zip(offsets.row(class)) {
            *v += o;
        }
    }
    add_noise(&mut rng, &mut raw_image, noise_scale);
    let raw_text = text_ref.matmul_t(&mix_text);

    let mut pre_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pre_rng.set_stream(STREAM_PRETRAIN);
    let (pre_rows, pretrain_labels) = sample_images(
        &mut pre_rng,
        &image_anchors,
        cfg.pretrain_samples_per_class,
        sigma,
        &shared,
        &modal,
    );
    let mut pretrain_raw_image = Matrix::from_rows(&pre_rows)?.matmul_t(&mix_image);
    add_noise(&mut pre_rng, &mut pretrain_raw_image, noise_scale);

    Ok(SyntheticData {
        image: EmbeddingTable::new(image_ref, labels, Modality::Image)?,
        text: EmbeddingTable::new(text_ref, (0..k).collect(), Modality::Text)?,
        raw_image,
        raw_text,
        pretrain_raw_image,
        pretrain_labels,
    })
}

/// Class-major samples around each anchor.
fn sample_images(
    rng: &mut ChaCha8Rng,
    anchors: &[Vec<f64>],
    per_class: usize,
    sigma: f64,
    shared: &[f64],
    modal: &[f64],
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = shared.len();
    let mut rows = Vec::with_capacity(anchors.len() * per_class);
    let mut labels = Vec::with_capacity(anchors.len() * per_class);
    for (class, anchor) in anchors.iter().enumerate() {
        for _ in 0..per_class {
            let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for axis in [shared, modal] {
                let p = dot(&u, axis);
                u.iter_mut().zip(axis).for_each(|(v, a)| *v -= p * a);
            }
            let un = norm(&u);
            let sample: Vec<f64> = anchor.iter().zip(&u).map(|(a, v)| a + sigma * v / un).collect();
            rows.push(unit(sample));
            labels.push(class);
        }
    }
    (rows, labels)
}

fn add_noise(rng: &mut ChaCha8Rng, m: &mut Matrix, scale: f64) {
    for v in m.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += scale * z;
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        scale * z
    })
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cosine;

    fn inter_modality_mean(data: &SyntheticData) -> f64 {
        let mut total = 0.0;
        for i in 0..data.image.len() {
            for j in 0..data.text.len() {
                total += cosine(data.image.row(i), data.text.row(j)).unwrap();
            }
        }
        total / (data.image.len() * data.text.len()) as f64
    }

    #[test]
    fn pinned_config_hits_target_mean() {
        let cfg = SyntheticConfig {
            num_classes: 10,
            samples_per_class: 50,
            raw_dim: 32,
            cone_separation: 0.8,
            seed: 7,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let mean = inter_modality_mean(&data);
        assert!((0.15..=0.25).contains(&mean), "mean {mean}");
        assert_eq!(data.image.len(), 500);
        assert_eq!(data.pretrain_raw_image.rows(), 500);
        assert_eq!(data.raw_text.shape(), (10, 32));
    }

    #[test]
    fn zero_separation_collapses_modalities() {
        let cfg = SyntheticConfig {
            cone_separation: 0.0,
            intra_class_spread: 1e-9,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        for i in 0..data.image.len() {
            let t = data.text.row(data.image.labels()[i]);
            assert!(cosine(data.image.row(i), t).unwrap() > 1.0 - 1e-12);
        }
    }

    #[test]
    fn antipodal_limit() {
        let cfg = SyntheticConfig {
            cone_separation: 2.0,
            intra_class_spread: 0.05,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg).unwrap();
        let mean = inter_modality_mean(&data);
        assert!(mean < -0.95, "mean {mean}");
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticConfig::default();
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SyntheticConfig { seed: 8, ..cfg };
        assert_ne!(generate_synthetic(&other).unwrap().raw_image, generate_synthetic(&SyntheticConfig::default()).unwrap().raw_image);
    }

    #[test]
    fn too_few_dimensions() {
        let cfg = SyntheticConfig {
            num_classes: 10,
            raw_dim: 11,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::InfeasibleGeometry(_))));
    }
}
