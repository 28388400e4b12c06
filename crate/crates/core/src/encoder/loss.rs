//! Losses over raw (unnormalized) tower outputs, each returning its gradient
//! with respect to those outputs. Normalization happens inside.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

#[derive(Debug, Clone)]
pub struct PairGrad {
    pub loss: f64,
    pub d_image: Matrix,
    pub d_text: Matrix,
    /// Derivative with respect to the logit scale itself.
    pub d_scale: f64,
}

pub(crate) struct Normalized {
    pub unit: Matrix,
    pub norms: Vec<f64>,
}

pub(crate) fn normalize(z: &Matrix) -> Result<Normalized> {
    let mut unit = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let n = norm(z.row(r));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        unit.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok(Normalized { unit, norms })
}

/// Pulls a gradient on unit rows back to the raw rows:
/// `dz = (du - u (u . du)) / |z|`.
pub(crate) fn normalize_backward(n: &Normalized, d_unit: &Matrix) -> Matrix {
    let mut out = d_unit.clone();
    for r in 0..out.rows() {
        let u = n.unit.row(r);
        let proj = dot(u, d_unit.row(r));
        let inv = 1.0 / n.norms[r];
        for (o, &ui) in out.row_mut(r).iter_mut().zip(u) {
            *o = (*o - ui * proj) * inv;
        }
    }
    out
}

/// Cross-entropy of a softmax restricted to `active` logits. Returns the loss
/// and the gradient with respect to every logit; inactive entries receive
/// exactly zero.
pub fn masked_softmax_ce(logits: &[f64], target: usize, active: &[bool]) -> Result<(f64, Vec<f64>)> {
    if !active.get(target).copied().unwrap_or(false) {
        return Err(Error::InactiveLabel { label: target });
    }
    let max = logits
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(v, _)| (v - max).exp())
        .sum();
    let log_z = max + total.ln();
    let mut grad = vec![0.0; logits.len()];
    for (j, (g, (&v, &a))) in grad.iter_mut().zip(logits.iter().zip(active)).enumerate() {
        if a {
            *g = (v - log_z).exp() - if j == target { 1.0 } else { 0.0 };
        }
    }
    Ok((log_z - logits[target], grad))
}

/// Soft-target cross-entropy `-sum_j q_j log softmax(l)_j`, gradient `p - q`.
fn soft_ce(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &q) in logits.iter().zip(targets) {
        if q > 0.0 {
            loss -= q * (l - log_z);
        }
        grad.push((l - log_z).exp() - q);
    }
    (loss, grad)
}

/// Symmetric InfoNCE over a batch of image/text pairs. Pairs sharing a label
/// are all positives for each other (uniform soft targets), so duplicate
/// classes in a batch are not treated as negatives.
pub fn contrastive_loss(image_z: &Matrix, text_z: &Matrix, labels: &[usize], scale: f64) -> Result<PairGrad> {
    let b = image_z.rows();
    if b < 2 {
        return Err(Error::SinglePairBatch);
    }
    if text_z.rows() != b || labels.len() != b {
        return Err(Error::DimensionMismatch("contrastive batch sizes differ".into()));
    }
    let img = normalize(image_z)?;
    let txt = normalize(text_z)?;
    let cos = img.unit.matmul_t(&txt.unit);

    let targets = Matrix::from_fn(b, b, |i, j| if labels[i] == labels[j] { 1.0 } else { 0.0 });
    let counts: Vec<f64> = (0..b).map(|i| targets.row(i).iter().sum()).collect();

    let bf = b as f64;
    let mut d_logits = Matrix::zeros(b, b);
    let mut loss = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = cos.row(i).iter().map(|c| scale * c).collect();
        let q: Vec<f64> = targets.row(i).iter().map(|t| t / counts[i]).collect();
        let (l, g) = soft_ce(&logits, &q);
        loss += 0.5 * l / bf;
        for (d, gj) in d_logits.row_mut(i).iter_mut().zip(g) {
            *d += 0.5 * gj / bf;
        }
    }
    for j in 0..b {
        let logits: Vec<f64> = (0..b).map(|i| scale * cos[(i, j)]).collect();
        let q: Vec<f64> = (0..b).map(|i| targets[(i, j)] / counts[j]).collect();
        let (l, g) = soft_ce(&logits, &q);
        loss += 0.5 * l / bf;
        for (i, gi) in g.into_iter().enumerate() {
            d_logits[(i, j)] += 0.5 * gi / bf;
        }
    }

    let d_scale = dot(d_logits.data(), cos.data());
    let d_cos = d_logits.scaled(scale);
    let d_img_unit = d_cos.matmul(&txt.unit);
    let d_txt_unit = d_cos.t_matmul(&img.unit);
    Ok(PairGrad {
        loss,
        d_image: normalize_backward(&img, &d_img_unit),
        d_text: normalize_backward(&txt, &d_txt_unit),
        d_scale,
    })
}

/// Text-head cross-entropy over `scale * cos(image_i, text_k)` for every
/// class row `k` of `text_z`, restricted to `active` classes, plus
/// `alignment_weight` times the mean squared distance between each unit image
/// embedding and its own unit class text.
pub fn text_ce_loss(
    image_z: &Matrix,
    text_z: &Matrix,
    labels: &[usize],
    active: &[bool],
    scale: f64,
    alignment_weight: f64,
) -> Result<PairGrad> {
    let b = image_z.rows();
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    if labels.len() != b || active.len() != text_z.rows() {
        return Err(Error::DimensionMismatch("text CE batch shapes differ".into()));
    }
    let img = normalize(image_z)?;
    let txt = normalize(text_z)?;
    let cos = img.unit.matmul_t(&txt.unit);
    let bf = b as f64;

    let mut d_cos = Matrix::zeros(b, text_z.rows());
    let mut d_scale = 0.0;
    let mut loss = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = cos.row(i).iter().map(|c| scale * c).collect();
        let (l, g) = masked_softmax_ce(&logits, labels[i], active)?;
        loss += l / bf;
        for (j, gj) in g.into_iter().enumerate() {
            d_cos[(i, j)] = scale * gj / bf;
            d_scale += gj * cos[(i, j)] / bf;
        }
    }
    let mut d_img_unit = d_cos.matmul(&txt.unit);
    let mut d_txt_unit = d_cos.t_matmul(&img.unit);

    if alignment_weight != 0.0 {
        for (i, &y) in labels.iter().enumerate() {
            let diff: Vec<f64> = img.unit.row(i).iter().zip(txt.unit.row(y)).map(|(x, t)| x - t).collect();
            loss += alignment_weight * dot(&diff, &diff) / bf;
            let c = 2.0 * alignment_weight / bf;
            for (d, v) in d_img_unit.row_mut(i).iter_mut().zip(&diff) {
                *d += c * v;
            }
            for (d, v) in d_txt_unit.row_mut(y).iter_mut().zip(&diff) {
                *d -= c * v;
            }
        }
    }

    Ok(PairGrad {
        loss,
        d_image: normalize_backward(&img, &d_img_unit),
        d_text: normalize_backward(&txt, &d_txt_unit),
        d_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_logits_get_zero_gradient() {
        let logits = [2.0, -1.0, 0.5, 3.0];
        let active = [true, false, true, false];
        let (loss, grad) = masked_softmax_ce(&logits, 2, &active).unwrap();
        assert_eq!(grad[1], 0.0);
        assert_eq!(grad[3], 0.0);
        let z: f64 = 2.0f64.exp() + 0.5f64.exp();
        assert!((loss - (z.ln() - 0.5)).abs() < 1e-14);
        assert!(grad.iter().sum::<f64>().abs() < 1e-15);
        assert!(masked_softmax_ce(&logits, 1, &active).is_err());
    }

    #[test]
    fn contrastive_needs_two_pairs() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(contrastive_loss(&z, &z, &[0], 10.0), Err(Error::SinglePairBatch)));
    }

    #[test]
    fn perfect_alignment_has_zero_alignment_term() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let a = text_ce_loss(&z, &z, &[0, 1], &[true, true], 5.0, 0.0).unwrap();
        let b = text_ce_loss(&z, &z, &[0, 1], &[true, true], 5.0, 1.0).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-15);
    }
}
