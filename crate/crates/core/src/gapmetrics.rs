//! Modality-gap statistics over an image table and a per-class text table.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Mean cosine between each image and its own class text.
    pub pos: f64,
    /// Mean over images of the mean cosine to every other class text.
    pub neg: f64,
    /// Mean cosine over all image/text pairs.
    pub inter_modality_mean: f64,
    pub n_images: usize,
    pub n_classes: usize,
}

impl GapReport {
    pub const CSV_HEADER: &'static str = "pos,neg,inter_modality_mean,n_images,n_classes";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.pos, self.neg, self.inter_modality_mean, self.n_images, self.n_classes
        )
    }
}

/// Computes pos, neg and the inter-modality mean.
///
/// `texts` must hold one row per class; its labels say which class each row
/// describes. Every image label must have a text row.
pub fn measure_gap(images: &EmbeddingTable, texts: &EmbeddingTable) -> Result<GapReport> {
    let k = texts.len();
    if k < 2 {
        return Err(Error::SingleClass);
    }
    if images.is_empty() {
        return Err(Error::Empty("image table"));
    }
    if images.dim() != texts.dim() {
        return Err(Error::DimensionMismatch(format!(
            "image dim {} vs text dim {}",
            images.dim(),
            texts.dim()
        )));
    }
    let num_slots = texts.labels().iter().max().map_or(0, |m| m + 1);
    let mut row_of_class = vec![None; num_slots];
    for (row, &class) in texts.labels().iter().enumerate() {
        if row_of_class[class].replace(row).is_some() {
            return Err(Error::DimensionMismatch(format!(
                "class {class} has more than one text row"
            )));
        }
    }

    let text_norms: Vec<f64> = (0..k).map(|j| norm(texts.row(j))).collect();
    let n = images.len();
    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let mut all_sum = 0.0;
    let mut sims = vec![0.0; k];
    for i in 0..n {
        let label = images.labels()[i];
        let target = row_of_class
            .get(label)
            .copied()
            .flatten()
            .ok_or(Error::LabelOutOfRange {
                label,
                num_classes: num_slots,
            })?;
        let x = images.row(i);
        let xn = norm(x);
        for (j, s) in sims.iter_mut().enumerate() {
            *s = dot(x, texts.row(j)) / (xn * text_norms[j]);
        }
        let mut neg_i = 0.0;
        let mut all_i = 0.0;
        for (j, &s) in sims.iter().enumerate() {
            if j != target {
                neg_i += s;
            }
            all_i += s;
        }
        pos_sum += sims[target];
        neg_sum += neg_i / (k - 1) as f64;
        all_sum += all_i / k as f64;
    }

    Ok(GapReport {
        pos: pos_sum / n as f64,
        neg: neg_sum / n as f64,
        inter_modality_mean: all_sum / n as f64,
        n_images: n,
        n_classes: k,
    })
}

/// `|neg_now - neg_ref| / neg_ref`, with the reference left unsigned in the
/// denominator. A negative reference therefore yields a non-positive result.
pub fn relative_delta(neg_now: f64, neg_ref: f64) -> Result<f64> {
    if neg_ref == 0.0 {
        return Err(Error::ZeroReferenceGap);
    }
    Ok((neg_now - neg_ref).abs() / neg_ref)
}
