//! Subspace coverage between image features and classifier weights, and
//! numerical checks of the two classifier-geometry results: an optimal
//! classifier can always be taken inside the span of the image features, and
//! a text classifier of rank `r` misses the optimum by at least the energy of
//! the optimum's singular directions beyond `r`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingTable, Modality};
use crate::error::{Error, Result};
use crate::linalg::{norm, orthonormality_error, qr_basis, svd, Matrix};

pub const DEFAULT_ENERGY: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    SvdEnergy { threshold: f64 },
    Qr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    ImageFeatures,
    TextClassifier,
    VisualClassifier,
    Combined,
}

/// Orthonormal columns plus where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    pub basis: Matrix,
    pub provenance: Provenance,
    pub source: SourceTag,
}

impl SubspaceBasis {
    pub fn new(basis: Matrix, provenance: Provenance, source: SourceTag) -> Result<Self> {
        if orthonormality_error(&basis) > 1e-8 {
            return Err(Error::InvalidConfig("basis columns are not orthonormal".into()));
        }
        Ok(Self {
            basis,
            provenance,
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }
}

/// Smallest `k` with `sum_{i<k} s_i^2 >= energy * sum_i s_i^2`.
pub fn energy_rank(singular_values: &[f64], energy: f64) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let target = energy * total;
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc >= target {
            return i + 1;
        }
    }
    singular_values.len()
}

/// Left singular vectors of the feature matrix (features as columns) that
/// capture `energy` of the total squared singular mass.
pub fn image_basis(features: &EmbeddingTable, energy: f64) -> Result<SubspaceBasis> {
    if features.is_empty() {
        return Err(Error::Empty("image features"));
    }
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::InvalidConfig("energy must lie in (0, 1]".into()));
    }
    let x = features.vectors().transpose();
    let dec = svd(&x)?;
    let rank = dec.rank();
    let k = energy_rank(&dec.s[..rank], energy).max(1);
    let cols: Vec<usize> = (0..k).collect();
    SubspaceBasis::new(
        dec.u.select_columns(&cols),
        Provenance::SvdEnergy { threshold: energy },
        SourceTag::ImageFeatures,
    )
}

/// QR basis of a weight matrix whose columns are class vectors.
pub fn classifier_basis(weights: &Matrix, source: SourceTag) -> Result<SubspaceBasis> {
    SubspaceBasis::new(qr_basis(weights)?, Provenance::Qr, source)
}

/// QR basis of `[text | visual]`.
pub fn combined_basis(text: &Matrix, visual: &Matrix) -> Result<SubspaceBasis> {
    classifier_basis(&Matrix::hcat(&[text, visual])?, SourceTag::Combined)
}

/// Mean residual norm of the source basis vectors after projecting onto the
/// target span. Not symmetric.
pub fn coverage_distance(source: &SubspaceBasis, target: &SubspaceBasis) -> Result<f64> {
    if source.ambient_dim() != target.ambient_dim() {
        return Err(Error::DimensionMismatch(format!(
            "ambient dimensions {} and {}",
            source.ambient_dim(),
            target.ambient_dim()
        )));
    }
    if source.dim() == 0 {
        return Err(Error::Empty("source basis"));
    }
    let mut total = 0.0;
    for c in 0..source.dim() {
        let x = source.basis.column(c);
        let coeffs = target.basis.t_matvec(&x);
        let proj = target.basis.matvec(&coeffs);
        let resid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a - b).collect();
        total += norm(&resid);
    }
    Ok(total / source.dim() as f64)
}

/// Coverage of the image-feature subspace by the text, visual and combined
/// classifier subspaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceAnalysis {
    pub energy: f64,
    pub rank_image: usize,
    pub rank_text: usize,
    pub rank_visual: usize,
    pub rank_combined: usize,
    pub d_image_text: f64,
    pub d_image_visual: f64,
    pub d_image_combined: f64,
}

impl SubspaceAnalysis {
    pub const CSV_HEADER: &'static str = "comparison,distance,source_rank,target_rank";

    /// One row per comparison.
    pub fn csv_rows(&self) -> Vec<String> {
        vec![
            format!("d(B_i,B_t),{},{},{}", self.d_image_text, self.rank_image, self.rank_text),
            format!("d(B_i,B_vc),{},{},{}", self.d_image_visual, self.rank_image, self.rank_visual),
            format!(
                "d(B_i,B_t+vc),{},{},{}",
                self.d_image_combined, self.rank_image, self.rank_combined
            ),
        ]
    }
}

/// `text` and `visual` hold one class vector per column.
pub fn analyze_subspaces(
    image_features: &EmbeddingTable,
    text: &Matrix,
    visual: &Matrix,
    energy: f64,
) -> Result<SubspaceAnalysis> {
    let b_i = image_basis(image_features, energy)?;
    let b_t = classifier_basis(text, SourceTag::TextClassifier)?;
    let b_vc = classifier_basis(visual, SourceTag::VisualClassifier)?;
    let b_tvc = combined_basis(text, visual)?;
    Ok(SubspaceAnalysis {
        energy,
        rank_image: b_i.dim(),
        rank_text: b_t.dim(),
        rank_visual: b_vc.dim(),
        rank_combined: b_tvc.dim(),
        d_image_text: coverage_distance(&b_i, &b_t)?,
        d_image_visual: coverage_distance(&b_i, &b_vc)?,
        d_image_combined: coverage_distance(&b_i, &b_tvc)?,
    })
}

/// Mean softmax cross-entropy of linear logits `w_cᵀ x_i`; labels index
/// columns of `w`.
pub fn linear_ce(w: &Matrix, features: &Matrix, labels: &[usize]) -> Result<f64> {
    if w.rows() != features.cols() || labels.len() != features.rows() {
        return Err(Error::DimensionMismatch("linear classifier shapes".into()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= w.cols()) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: w.cols(),
        });
    }
    let logits = features.matmul(w);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    Ok(loss / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrrelevanceReport {
    /// `max |W_perpᵀ X|` over all entries.
    pub max_perp_response: f64,
    pub loss_full: f64,
    pub loss_parallel: f64,
    pub parallel_norm: f64,
    pub perp_norm: f64,
}

impl IrrelevanceReport {
    pub fn holds(&self) -> bool {
        self.max_perp_response <= 1e-8 && (self.loss_full - self.loss_parallel).abs() <= 1e-10
    }
}

/// Splits `w` (one column per class) into parts inside and orthogonal to the
/// span of the features and compares their cross-entropy on the features.
pub fn verify_orthogonal_irrelevance(w: &Matrix, features: &EmbeddingTable) -> Result<IrrelevanceReport> {
    if w.rows() != features.dim() {
        return Err(Error::DimensionMismatch(format!(
            "classifier rows {} vs feature dim {}",
            w.rows(),
            features.dim()
        )));
    }
    let x = features.vectors();
    let basis = qr_basis(&x.transpose())?;
    let parallel = basis.matmul(&basis.t_matmul(w));
    let perp = w.sub(&parallel);
    let response = x.matmul(&perp);
    let max_perp_response = response.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(IrrelevanceReport {
        max_perp_response,
        loss_full: linear_ce(w, x, features.labels())?,
        loss_parallel: linear_ce(&parallel, x, features.labels())?,
        parallel_norm: parallel.frobenius_norm(),
        perp_norm: perp.frobenius_norm(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `|T_par - W_opt|_F^2` for the text matrix projected onto the span of
    /// the optimum's left singular vectors.
    pub achieved_error: f64,
    /// `sum_{i=r+1}^{r'} s_i^2`.
    pub lower_bound: f64,
    /// `|U_r A* - W_opt|_F^2` with `A* = U_rᵀ W_opt`.
    pub optimal_error: f64,
    /// Rank of `T_par`.
    pub r: usize,
    /// Rank of `W_opt`.
    pub r_prime: usize,
    pub singular_values: Vec<f64>,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.achieved_error >= self.lower_bound - 1e-8 && (self.optimal_error - self.lower_bound).abs() <= 1e-8
    }
}

/// Leading `r` left singular vectors of `w_opt` and its singular values.
pub fn leading_directions(w_opt: &Matrix, r: usize) -> Result<(Matrix, Vec<f64>)> {
    let dec = svd(w_opt)?;
    let r = r.min(dec.u.cols());
    let cols: Vec<usize> = (0..r).collect();
    Ok((dec.u.select_columns(&cols), dec.s))
}

/// `|U_r A - W|_F^2`.
pub fn alignment_error(u_r: &Matrix, a: &Matrix, w: &Matrix) -> f64 {
    u_r.matmul(a).sub(w).frobenius_norm_sq()
}

pub fn verify_misalignment_bound(t: &Matrix, w_opt: &Matrix) -> Result<BoundReport> {
    if t.shape() != w_opt.shape() {
        return Err(Error::DimensionMismatch(format!(
            "text matrix {:?} vs classifier {:?}",
            t.shape(),
            w_opt.shape()
        )));
    }
    if w_opt.data().iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroSubspace);
    }
    let dec = svd(w_opt)?;
    let r_prime = dec.rank();
    let u_full = dec.u.select_columns(&(0..r_prime).collect::<Vec<_>>());

    let t_par = u_full.matmul(&u_full.t_matmul(t));
    let r = if t_par.data().iter().all(|&v| v == 0.0) {
        0
    } else {
        svd(&t_par)?.rank()
    }
    .min(r_prime);

    let lower_bound: f64 = dec.s[r..r_prime].iter().map(|s| s * s).sum();
    let u_r = u_full.select_columns(&(0..r).collect::<Vec<_>>());
    let a_star = u_r.t_matmul(w_opt);
    Ok(BoundReport {
        achieved_error: t_par.sub(w_opt).frobenius_norm_sq(),
        lower_bound,
        optimal_error: alignment_error(&u_r, &a_star, w_opt),
        r,
        r_prime,
        singular_values: dec.s,
    })
}

/// Unconstrained linear classifier trained by full-batch gradient descent on
/// the mean cross-entropy. Returns `dim x num_classes`.
pub fn fit_linear_classifier(features: &EmbeddingTable, num_classes: usize, steps: usize, lr: f64) -> Result<Matrix> {
    let x = features.vectors();
    let labels = features.labels();
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    let n = x.rows() as f64;
    let mut w = Matrix::zeros(x.cols(), num_classes);
    for _ in 0..steps {
        let mut probs = x.matmul(&w);
        for (i, &y) in labels.iter().enumerate() {
            let row = probs.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
            row[y] -= 1.0;
        }
        let grad = x.t_matmul(&probs).scaled(1.0 / n);
        w.add_assign_scaled(&grad, -lr);
    }
    Ok(w)
}

/// Aggregate of both checks over random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSweep {
    pub trials: usize,
    pub irrelevance_failures: usize,
    /// Largest `|loss(w) - loss(w_par)|` seen.
    pub max_loss_gap: f64,
    pub bound_failures: usize,
    /// Largest `|optimal_error - lower_bound|` seen.
    pub max_tightness_error: f64,
    /// Random `A` matrices that beat the bound (must stay zero).
    pub random_a_violations: usize,
}

impl VerificationSweep {
    pub fn holds(&self) -> bool {
        self.irrelevance_failures == 0 && self.bound_failures == 0 && self.random_a_violations == 0
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Runs both checks on `trials` random instances: rank-deficient features
/// with a random classifier, and a random low-rank optimum against a random
/// text matrix of smaller rank (plus a few random `A` per instance).
pub fn random_verification(trials: usize, seed: u64) -> Result<VerificationSweep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sweep = VerificationSweep {
        trials,
        irrelevance_failures: 0,
        max_loss_gap: 0.0,
        bound_failures: 0,
        max_tightness_error: 0.0,
        random_a_violations: 0,
    };
    for _ in 0..trials {
        let d = rng.random_range(4..=10);
        let k = rng.random_range(2..=6);
        let n = rng.random_range(3..=10);
        let rank = rng.random_range(1..d);
        let raw = gaussian(&mut rng, n, rank).matmul(&gaussian(&mut rng, rank, d));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let features = EmbeddingTable::from_unnormalized(&raw, labels, Modality::Image)?;
        let rep = verify_orthogonal_irrelevance(&gaussian(&mut rng, d, k), &features)?;
        sweep.max_loss_gap = sweep.max_loss_gap.max((rep.loss_full - rep.loss_parallel).abs());
        if !rep.holds() {
            sweep.irrelevance_failures += 1;
        }

        let r_prime = rng.random_range(1..=k.min(d));
        let w_opt = gaussian(&mut rng, d, r_prime).matmul(&gaussian(&mut rng, r_prime, k));
        let r = rng.random_range(0..=r_prime);
        let t = if r == 0 {
            // text entirely outside the optimum's column space is still a
            // valid instance; use a tiny random matrix instead of zero
            gaussian(&mut rng, d, k).scaled(1e-3)
        } else {
            gaussian(&mut rng, d, r).matmul(&gaussian(&mut rng, r, k))
        };
        let rep = verify_misalignment_bound(&t, &w_opt)?;
        sweep.max_tightness_error = sweep.max_tightness_error.max((rep.optimal_error - rep.lower_bound).abs());
        if !rep.holds() {
            sweep.bound_failures += 1;
        }
        let (u_r, _) = leading_directions(&w_opt, rep.r)?;
        for _ in 0..3 {
            let a = gaussian(&mut rng, u_r.cols(), k);
            if alignment_error(&u_r, &a, &w_opt) < rep.lower_bound - 1e-8 {
                sweep.random_a_violations += 1;
            }
        }
    }
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;

    fn basis(cols: Vec<Vec<f64>>) -> SubspaceBasis {
        classifier_basis(&Matrix::from_columns(&cols).unwrap(), SourceTag::TextClassifier).unwrap()
    }

    #[test]
    fn energy_rank_hand_spectrum() {
        assert_eq!(energy_rank(&[3.0, 2.0, 1.0], 0.9), 2);
        assert_eq!(energy_rank(&[3.0, 2.0, 1.0], 1.0), 3);
        assert_eq!(energy_rank(&[3.0, 2.0, 1.0], 9.0 / 14.0), 1);
    }

    #[test]
    fn repeated_feature_has_rank_one_basis() {
        let rows = vec![vec![0.6, 0.8, 0.0]; 5];
        let t = EmbeddingTable::new(Matrix::from_rows(&rows).unwrap(), vec![0; 5], Modality::Image).unwrap();
        for e in [0.1, 0.95, 1.0] {
            assert_eq!(image_basis(&t, e).unwrap().dim(), 1);
        }
    }

    #[test]
    fn coverage_extremes() {
        let a = basis(vec![vec![1.0, 0.0, 0.0, 0.0]]);
        let ab = basis(vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        let c = basis(vec![vec![0.0, 0.0, 1.0, 0.0]]);
        assert!(coverage_distance(&a, &ab).unwrap() < 1e-15);
        assert!((coverage_distance(&a, &c).unwrap() - 1.0).abs() < 1e-15);
        // not symmetric
        assert!((coverage_distance(&ab, &a).unwrap() - 0.5).abs() < 1e-15);
        assert!(coverage_distance(&ab, &basis(vec![vec![1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn hand_built_bound_is_five() {
        // W = diag(3, 2, 1) in the leading 3x3 block of a 4x3 matrix.
        let mut w = Matrix::zeros(4, 3);
        w[(0, 0)] = 3.0;
        w[(1, 1)] = 2.0;
        w[(2, 2)] = 1.0;
        let mut t = Matrix::zeros(4, 3);
        t[(0, 0)] = 1.5;
        t[(0, 2)] = -0.7;
        t[(3, 1)] = 4.0; // orthogonal to W's column space
        let rep = verify_misalignment_bound(&t, &w).unwrap();
        assert_eq!((rep.r, rep.r_prime), (1, 3));
        assert!((rep.lower_bound - 5.0).abs() < 1e-12);
        assert!((rep.optimal_error - 5.0).abs() < 1e-12);
        assert!(rep.achieved_error >= rep.lower_bound);
        assert!(rep.holds());
    }

    #[test]
    fn full_rank_text_meets_optimum() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![0.0, 0.0]]).unwrap();
        let rep = verify_misalignment_bound(&w, &w).unwrap();
        assert_eq!(rep.r, rep.r_prime);
        assert!(rep.lower_bound.abs() < 1e-12);
        assert!(rep.achieved_error < 1e-20);
        assert!(rep.optimal_error < 1e-20);
    }

    #[test]
    fn zero_classifier_rejected() {
        assert!(verify_misalignment_bound(&Matrix::zeros(3, 2), &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn orthogonal_classifier_gives_uniform_loss() {
        let feats = EmbeddingTable::new(
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(),
            vec![0, 2],
            Modality::Image,
        )
        .unwrap();
        let mut w = Matrix::zeros(3, 4);
        for c in 0..4 {
            w[(2, c)] = c as f64 + 1.0;
        }
        let rep = verify_orthogonal_irrelevance(&w, &feats).unwrap();
        assert_eq!(rep.loss_full, 4f64.ln());
        assert_eq!(rep.max_perp_response, 0.0);
        assert!(rep.holds());
    }
}
