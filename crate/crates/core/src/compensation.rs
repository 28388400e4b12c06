//! Visual-space cosine classifier trained on frozen image features, and the
//! text/visual ensemble.
//!
//! New classes start from their normalized class-mean prototype; classes from
//! earlier tasks are frozen. Training is projected gradient descent on the
//! unit sphere, so every column stays unit length.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingTable;
use crate::encoder::{softmax_in_place, text_head_scores, DualEncoder};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

pub const DEFAULT_SCALE: f64 = 16.0;
const BATCH_SIZE: usize = 32;
const COLUMN_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub beta: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { beta: 4.0 }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidConfig("beta must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationClassifier {
    /// `embed_dim x num_seen_classes`, unit columns.
    weights: Matrix,
    class_ids: Vec<usize>,
    frozen: Vec<bool>,
    scale: f64,
}

impl CompensationClassifier {
    pub fn new(embed_dim: usize, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidConfig("classifier scale must be positive".into()));
        }
        Ok(Self {
            weights: Matrix::zeros(embed_dim, 0),
            class_ids: Vec::new(),
            frozen: Vec::new(),
            scale,
        })
    }

    pub fn from_parts(weights: Matrix, class_ids: Vec<usize>, frozen: Vec<bool>, scale: f64) -> Result<Self> {
        if weights.cols() != class_ids.len() || frozen.len() != class_ids.len() {
            return Err(Error::DimensionMismatch("classifier columns, ids and mask differ".into()));
        }
        for c in 0..weights.cols() {
            let n = norm(&weights.column(c));
            if (n - 1.0).abs() > COLUMN_NORM_TOLERANCE {
                return Err(Error::NonUnitRow { row: c, norm: n });
            }
        }
        let mut clf = Self::new(weights.rows(), scale)?;
        clf.weights = weights;
        clf.class_ids = class_ids;
        clf.frozen = frozen;
        Ok(clf)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    /// Freezes every existing column and appends one prototype column per new
    /// class: the normalized mean of that class's features.
    pub fn init_new_classes(&self, features: &EmbeddingTable, new_classes: &[usize]) -> Result<Self> {
        if features.dim() != self.embed_dim() {
            return Err(Error::DimensionMismatch(format!(
                "features of dim {} for a {}-dim classifier",
                features.dim(),
                self.embed_dim()
            )));
        }
        let mut columns = self.weights.columns();
        let mut class_ids = self.class_ids.clone();
        for &class in new_classes {
            if class_ids.contains(&class) {
                return Err(Error::InvalidConfig(format!("class {class} already has a column")));
            }
            let rows = features.indices_of_class(class);
            if rows.is_empty() {
                return Err(Error::MissingClass(class));
            }
            let mut mean = vec![0.0; features.dim()];
            for &r in &rows {
                for (m, v) in mean.iter_mut().zip(features.row(r)) {
                    *m += v;
                }
            }
            let count = rows.len() as f64;
            mean.iter_mut().for_each(|m| *m /= count);
            let n = norm(&mean);
            if n <= 1e-12 {
                return Err(Error::DegeneratePrototype(class));
            }
            columns.push(mean.iter().map(|m| m / n).collect());
            class_ids.push(class);
        }
        let mut frozen = vec![true; self.class_ids.len()];
        frozen.resize(class_ids.len(), false);
        Ok(Self {
            weights: Matrix::from_fn(self.embed_dim(), columns.len(), |r, c| columns[c][r]),
            class_ids,
            frozen,
            scale: self.scale,
        })
    }

    /// Mini-batch projected SGD on the cross-entropy of `scale * cos` logits
    /// over every column. Frozen columns are never touched; unfrozen ones are
    /// renormalized after each step.
    pub fn train_classifier(&self, features: &EmbeddingTable, epochs: usize, lr: f64, seed: u64) -> Result<Self> {
        if !self.frozen.iter().any(|&f| !f) {
            return Err(Error::NothingToTrain);
        }
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if features.dim() != self.embed_dim() {
            return Err(Error::DimensionMismatch("feature dimension".into()));
        }
        let targets: Vec<usize> = features
            .labels()
            .iter()
            .map(|&l| self.column_of(l).ok_or(Error::MissingClass(l)))
            .collect::<Result<_>>()?;

        let mut clf = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..features.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(BATCH_SIZE) {
                let x = features.vectors().select_rows(batch);
                let y: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
                let (_, grad) = cosine_ce(&clf.weights, &x, &y, clf.scale)?;
                for c in 0..clf.num_classes() {
                    if clf.frozen[c] {
                        continue;
                    }
                    let mut col = clf.weights.column(c);
                    for (w, r) in col.iter_mut().zip(0..grad.rows()) {
                        *w -= lr * grad[(r, c)];
                    }
                    let n = norm(&col);
                    col.iter_mut().for_each(|w| *w /= n);
                    clf.weights.set_column(c, &col);
                }
            }
        }
        Ok(clf)
    }

    /// `scale * cos(x_i, w_c)` for every row of `emb` and every column.
    pub fn logits(&self, emb: &Matrix) -> Result<Matrix> {
        if emb.cols() != self.embed_dim() {
            return Err(Error::DimensionMismatch("embedding dimension".into()));
        }
        let col_norms: Vec<f64> = (0..self.num_classes()).map(|c| norm(&self.weights.column(c))).collect();
        let mut out = emb.matmul(&self.weights);
        for r in 0..out.rows() {
            let xn = norm(emb.row(r));
            if xn == 0.0 {
                return Err(Error::ZeroVector);
            }
            for (v, cn) in out.row_mut(r).iter_mut().zip(&col_norms) {
                *v = self.scale * *v / (xn * cn);
            }
        }
        Ok(out)
    }

    /// Softmax of [`Self::logits`].
    pub fn probabilities(&self, emb: &Matrix) -> Result<Matrix> {
        let mut out = self.logits(emb)?;
        let active = vec![true; self.num_classes()];
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r), &active);
        }
        Ok(out)
    }
}

/// Mean cross-entropy of `scale * cos(x_i, w_c)` logits and its gradient with
/// respect to the (unnormalized) weight columns. `targets` are column indices.
pub fn cosine_ce(weights: &Matrix, features: &Matrix, targets: &[usize], scale: f64) -> Result<(f64, Matrix)> {
    let (d, c) = weights.shape();
    if features.cols() != d || targets.len() != features.rows() {
        return Err(Error::DimensionMismatch("cosine classifier batch".into()));
    }
    let n = features.rows();
    let cols = weights.columns();
    let col_norms: Vec<f64> = cols.iter().map(|w| norm(w)).collect();
    if col_norms.contains(&0.0) {
        return Err(Error::ZeroVector);
    }
    let unit_cols: Vec<Vec<f64>> = cols.iter().zip(&col_norms).map(|(w, n)| w.iter().map(|v| v / n).collect()).collect();

    let mut grad = Matrix::zeros(d, c);
    let mut loss = 0.0;
    for i in 0..n {
        let x = features.row(i);
        let xn = norm(x);
        if xn == 0.0 {
            return Err(Error::ZeroVector);
        }
        let xh: Vec<f64> = x.iter().map(|v| v / xn).collect();
        let cos: Vec<f64> = unit_cols.iter().map(|w| dot(w, &xh)).collect();
        let logits: Vec<f64> = cos.iter().map(|v| scale * v).collect();
        let (l, g) = crate::encoder::loss::masked_softmax_ce(&logits, targets[i], &vec![true; c])?;
        loss += l / n as f64;
        for k in 0..c {
            let coef = scale * g[k] / (n as f64 * col_norms[k]);
            if coef == 0.0 {
                continue;
            }
            for r in 0..d {
                grad[(r, k)] += coef * (xh[r] - cos[k] * unit_cols[k][r]);
            }
        }
    }
    Ok((loss, grad))
}

/// Ensemble on precomputed unit image embeddings: text-head
/// probabilities plus `beta` times visual-head probabilities, columns in
/// `texts` row order.
pub fn ensemble_scores(
    image_emb: &Matrix,
    texts: &EmbeddingTable,
    logit_scale: f64,
    clf: &CompensationClassifier,
    cfg: &EnsembleConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    if clf.num_classes() != texts.len() {
        return Err(Error::ClassCountMismatch {
            text: texts.len(),
            visual: clf.num_classes(),
        });
    }
    let order: Vec<usize> = texts
        .labels()
        .iter()
        .map(|&l| {
            clf.column_of(l).ok_or(Error::ClassCountMismatch {
                text: texts.len(),
                visual: clf.num_classes(),
            })
        })
        .collect::<Result<_>>()?;
    let mut scores = text_head_scores(image_emb, texts, logit_scale, None)?;
    let visual = clf.probabilities(image_emb)?;
    for r in 0..scores.rows() {
        let vis = visual.row(r);
        for (s, &col) in scores.row_mut(r).iter_mut().zip(&order) {
            *s += cfg.beta * vis[col];
        }
    }
    Ok(scores)
}

/// Ensemble scores for raw images.
pub fn ensemble_predict(
    enc: &DualEncoder,
    clf: &CompensationClassifier,
    image_raw: &Matrix,
    texts: &EmbeddingTable,
    cfg: &EnsembleConfig,
) -> Result<Matrix> {
    let emb = enc.image_embeddings(image_raw)?;
    ensemble_scores(&emb, texts, enc.logit_scale, clf, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;

    fn table(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> EmbeddingTable {
        EmbeddingTable::from_unnormalized(&Matrix::from_rows(&rows).unwrap(), labels, Modality::Image).unwrap()
    }

    #[test]
    fn single_sample_prototype_is_the_sample() {
        let feats = table(vec![vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]], vec![3, 5]);
        let clf = CompensationClassifier::new(3, DEFAULT_SCALE)
            .unwrap()
            .init_new_classes(&feats, &[3, 5])
            .unwrap();
        assert_eq!(clf.weights().column(0), feats.row(0).to_vec());
        assert_eq!(clf.weights().column(1), feats.row(1).to_vec());
        assert_eq!(clf.frozen_mask(), [false, false]);
    }

    #[test]
    fn antipodal_samples_are_degenerate() {
        let feats = table(vec![vec![1.0, 0.0], vec![-1.0, 0.0]], vec![0, 0]);
        let err = CompensationClassifier::new(2, DEFAULT_SCALE)
            .unwrap()
            .init_new_classes(&feats, &[0])
            .unwrap_err();
        assert!(err.to_string().starts_with("degenerate prototype (zero mean)"));
    }

    #[test]
    fn missing_class_and_duplicate() {
        let feats = table(vec![vec![1.0, 0.0]], vec![0]);
        let clf = CompensationClassifier::new(2, DEFAULT_SCALE).unwrap();
        assert!(matches!(clf.init_new_classes(&feats, &[1]), Err(Error::MissingClass(1))));
        let clf = clf.init_new_classes(&feats, &[0]).unwrap();
        assert!(clf.init_new_classes(&feats, &[0]).is_err());
    }

    #[test]
    fn second_init_freezes_old_columns() {
        let feats = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let clf = CompensationClassifier::new(2, DEFAULT_SCALE)
            .unwrap()
            .init_new_classes(&feats, &[0])
            .unwrap()
            .init_new_classes(&feats, &[1])
            .unwrap();
        assert_eq!(clf.frozen_mask(), [true, false]);
    }

    #[test]
    fn all_frozen_is_an_error() {
        let feats = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let clf = CompensationClassifier::new(2, DEFAULT_SCALE)
            .unwrap()
            .init_new_classes(&feats, &[0, 1])
            .unwrap()
            .init_new_classes(&feats, &[])
            .unwrap();
        assert!(matches!(clf.train_classifier(&feats, 1, 0.1, 0), Err(Error::NothingToTrain)));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let feats = table(vec![vec![1.0, 0.2], vec![0.1, 1.0]], vec![0, 1]);
        let clf = CompensationClassifier::new(2, DEFAULT_SCALE)
            .unwrap()
            .init_new_classes(&feats, &[0, 1])
            .unwrap();
        assert_eq!(clf.train_classifier(&feats, 0, 0.1, 0).unwrap(), clf);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let feats = table(vec![vec![1.0, 0.2, 0.0], vec![0.1, 1.0, 0.3], vec![0.0, 0.1, 1.0]], vec![0, 1, 2]);
        let clf = CompensationClassifier::new(3, DEFAULT_SCALE)
            .unwrap()
            .init_new_classes(&feats, &[0, 1, 2])
            .unwrap();
        let p = clf.probabilities(feats.vectors()).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
}
