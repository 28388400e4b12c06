//! Contrastive pretraining and adapter-only fine-tuning.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{contrastive_loss, text_ce_loss, PairGrad};
use super::{DualEncoder, MlpGrad, MAX_LOGIT_SCALE, MIN_LOGIT_SCALE};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    MaskedCe,
    CePlusAlignment,
    PlainCe,
    ContrastivePretrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Only read by `CePlusAlignment`.
    #[serde(default)]
    pub alignment_weight: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    pub fn new(loss_mode: LossMode, learning_rate: f64, epochs: usize, seed: u64) -> Self {
        Self {
            loss_mode,
            learning_rate,
            epochs,
            batch_size: 32,
            alignment_weight: if loss_mode == LossMode::CePlusAlignment { 1.0 } else { 0.0 },
            seed,
            optimizer: OptimizerKind::Sgd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !self.alignment_weight.is_finite() {
            return Err(Error::InvalidConfig("alignment_weight must be finite".into()));
        }
        Ok(())
    }
}

/// Which parameters an optimizer step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    /// Base weights and biases of both towers, then `ln(logit_scale)`.
    Base,
    /// Adapter `a` and `b` matrices of every layer.
    Adapters,
}

/// A differentiable batch objective.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Image row `i` is paired with text row `labels[i]`.
    Contrastive { labels: &'a [usize] },
    /// Cross-entropy over the `active` class rows of the text input, plus
    /// optional alignment.
    TextCe {
        labels: &'a [usize],
        active: &'a [bool],
        alignment_weight: f64,
    },
}

/// Loss and its gradient with respect to the parameters in `scope`, flattened
/// in the order used by [`DualEncoder::params`].
pub fn batch_objective(
    enc: &DualEncoder,
    raw_image: &Matrix,
    raw_text: &Matrix,
    objective: Objective<'_>,
    scope: ParamScope,
) -> Result<(f64, Vec<f64>)> {
    if scope == ParamScope::Adapters && !enc.has_adapters() {
        return Err(Error::InvalidConfig("no adapters attached".into()));
    }
    let (img_out, img_cache) = enc.image_net.forward_cached(raw_image);
    let (txt_out, txt_cache) = enc.text_net.forward_cached(raw_text);

    let (grad, d_text_rows) = match objective {
        Objective::Contrastive { labels } => {
            if labels.iter().any(|&l| l >= txt_out.rows()) {
                return Err(Error::DimensionMismatch("label without a text row".into()));
            }
            let paired = txt_out.select_rows(labels);
            let g = contrastive_loss(&img_out, &paired, labels, enc.logit_scale)?;
            let mut per_class = Matrix::zeros(txt_out.rows(), txt_out.cols());
            for (i, &l) in labels.iter().enumerate() {
                for (d, v) in per_class.row_mut(l).iter_mut().zip(g.d_text.row(i)) {
                    *d += v;
                }
            }
            (g, per_class)
        }
        Objective::TextCe {
            labels,
            active,
            alignment_weight,
        } => {
            let g = text_ce_loss(&img_out, &txt_out, labels, active, enc.logit_scale, alignment_weight)?;
            let d = g.d_text.clone();
            (g, d)
        }
    };
    let PairGrad {
        loss,
        d_image,
        d_scale,
        ..
    } = grad;
    let img_grad = enc.image_net.backward(&img_cache, &d_image);
    let txt_grad = enc.text_net.backward(&txt_cache, &d_text_rows);
    let flat = flatten_grads(&img_grad, &txt_grad, d_scale * enc.logit_scale, scope);
    Ok((loss, flat))
}

fn flatten_grads(img: &MlpGrad, txt: &MlpGrad, d_log_scale: f64, scope: ParamScope) -> Vec<f64> {
    let mut out = Vec::new();
    for g in [img, txt] {
        for layer in [&g.hidden, &g.output] {
            match scope {
                ParamScope::Base => {
                    out.extend_from_slice(layer.weight.data());
                    out.extend_from_slice(&layer.bias);
                }
                ParamScope::Adapters => {
                    out.extend_from_slice(layer.adapter_a.as_ref().expect("adapter").data());
                    out.extend_from_slice(layer.adapter_b.as_ref().expect("adapter").data());
                }
            }
        }
    }
    if scope == ParamScope::Base {
        out.push(d_log_scale);
    }
    out
}

impl DualEncoder {
    /// Flattened parameters in `scope`.
    pub fn params(&self, scope: ParamScope) -> Vec<f64> {
        let mut out = Vec::new();
        for net in [&self.image_net, &self.text_net] {
            for layer in net.layers() {
                match scope {
                    ParamScope::Base => {
                        out.extend_from_slice(layer.weight.data());
                        out.extend_from_slice(&layer.bias);
                    }
                    ParamScope::Adapters => {
                        let ad = layer.adapter.as_ref().expect("adapters attached");
                        out.extend_from_slice(ad.a.data());
                        out.extend_from_slice(ad.b.data());
                    }
                }
            }
        }
        if scope == ParamScope::Base {
            out.push(self.logit_scale.ln());
        }
        out
    }

    /// Inverse of [`DualEncoder::params`]. The logit scale is clamped to
    /// `[MIN_LOGIT_SCALE, MAX_LOGIT_SCALE]`.
    pub fn set_params(&mut self, scope: ParamScope, values: &[f64]) {
        let mut rest = values;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for net in [&mut self.image_net, &mut self.text_net] {
            for layer in net.layers_mut() {
                match scope {
                    ParamScope::Base => {
                        take(layer.weight.data_mut());
                        take(&mut layer.bias);
                    }
                    ParamScope::Adapters => {
                        let ad = layer.adapter.as_mut().expect("adapters attached");
                        take(ad.a.data_mut());
                        take(ad.b.data_mut());
                    }
                }
            }
        }
        if scope == ParamScope::Base {
            let mut log_scale = [0.0];
            take(&mut log_scale);
            self.logit_scale = log_scale[0].exp().clamp(MIN_LOGIT_SCALE, MAX_LOGIT_SCALE);
        }
        debug_assert!(rest.is_empty());
    }
}

struct Optimizer {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, n: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; n], vec![0.0; n]),
        };
        Self { kind, m, v, t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * frac).cos())
}

/// Shuffled mini-batches; a trailing single-row batch is folded into the
/// previous one so contrastive batches always hold at least two pairs.
fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn batch_count(n: usize, batch_size: usize) -> usize {
    let full = n.div_ceil(batch_size);
    if full > 1 && n % batch_size == 1 {
        full - 1
    } else {
        full
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub encoder: DualEncoder,
    /// Full-data contrastive loss before training and after every epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains base weights and the logit scale with symmetric InfoNCE. Image row
/// `i` is paired with text row `labels[i]` of `raw_text`.
pub fn pretrain_contrastive(
    enc: &DualEncoder,
    raw_image: &Matrix,
    raw_text: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Pretrained> {
    cfg.validate()?;
    if cfg.loss_mode != LossMode::ContrastivePretrain {
        return Err(Error::InvalidConfig("pretraining needs loss_mode contrastive_pretrain".into()));
    }
    if raw_image.rows() != labels.len() {
        return Err(Error::DimensionMismatch("one label per image row".into()));
    }
    if labels.len() < 2 || cfg.batch_size < 2 {
        return Err(Error::SinglePairBatch);
    }
    let mut enc = enc.clone();
    let full_loss = |enc: &DualEncoder| -> Result<f64> {
        let img = enc.image_net.forward(raw_image);
        let txt = enc.text_net.forward(raw_text).select_rows(labels);
        Ok(contrastive_loss(&img, &txt, labels, enc.logit_scale)?.loss)
    };

    let mut loss_trace = vec![full_loss(&enc)?];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = enc.params(ParamScope::Base);
    let mut opt = Optimizer::new(cfg.optimizer, params.len());
    let total = cfg.epochs * batch_count(labels.len(), cfg.batch_size);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        for batch in batches(labels.len(), cfg.batch_size, &mut rng) {
            let x = raw_image.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (_, grads) = batch_objective(&enc, &x, raw_text, Objective::Contrastive { labels: &y }, ParamScope::Base)?;
            opt.step(&mut params, &grads, cosine_lr(cfg.learning_rate, step, total));
            enc.set_params(ParamScope::Base, &params);
            // keep the optimizer's copy in sync with the clamped scale
            *params.last_mut().unwrap() = enc.logit_scale.ln();
            step += 1;
        }
        loss_trace.push(full_loss(&enc)?);
    }
    Ok(Pretrained {
        encoder: enc,
        loss_trace,
    })
}

/// Class bookkeeping for one task: classes introduced now and classes from
/// earlier tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskClasses {
    pub current: Vec<usize>,
    pub old: Vec<usize>,
}

impl TaskClasses {
    /// Active-logit mask over `num_classes` text rows.
    pub fn active_mask(&self, num_classes: usize, mask_old: bool) -> Vec<bool> {
        let mut active = vec![false; num_classes];
        for &c in &self.current {
            active[c] = true;
        }
        if !mask_old {
            for &c in &self.old {
                active[c] = true;
            }
        }
        active
    }
}

/// Epoch-at-a-time adapter fine-tuning with persistent optimizer state and a
/// cosine learning-rate schedule over `horizon_epochs`.
pub struct Finetuner {
    raw: Matrix,
    labels: Vec<usize>,
    class_text_raw: Matrix,
    active: Vec<bool>,
    alignment_weight: f64,
    cfg: TrainConfig,
    opt: Optimizer,
    rng: ChaCha8Rng,
    step: usize,
    total_steps: usize,
}

impl Finetuner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        enc: &DualEncoder,
        raw: &Matrix,
        labels: &[usize],
        class_text_raw: &Matrix,
        classes: &TaskClasses,
        cfg: &TrainConfig,
        mask_old: bool,
        horizon_epochs: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if !enc.has_adapters() {
            return Err(Error::InvalidConfig("fine-tuning needs adapters attached".into()));
        }
        let mask_old = mask_old || cfg.loss_mode == LossMode::MaskedCe;
        let alignment_weight = match cfg.loss_mode {
            LossMode::CePlusAlignment => cfg.alignment_weight,
            LossMode::MaskedCe | LossMode::PlainCe => 0.0,
            LossMode::ContrastivePretrain => {
                return Err(Error::InvalidConfig("contrastive_pretrain is not a fine-tuning loss".into()))
            }
        };
        if raw.rows() != labels.len() {
            return Err(Error::DimensionMismatch("one label per image row".into()));
        }
        if raw.rows() == 0 {
            return Err(Error::Empty("task data"));
        }
        let num_classes = class_text_raw.rows();
        if classes.current.iter().chain(&classes.old).any(|&c| c >= num_classes) {
            return Err(Error::DimensionMismatch("class index without a text row".into()));
        }
        let active = classes.active_mask(num_classes, mask_old);
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes || !active[l]) {
            return Err(Error::InactiveLabel { label });
        }
        let n_params = enc.params(ParamScope::Adapters).len();
        Ok(Self {
            raw: raw.clone(),
            labels: labels.to_vec(),
            class_text_raw: class_text_raw.clone(),
            active,
            alignment_weight,
            cfg: cfg.clone(),
            opt: Optimizer::new(cfg.optimizer, n_params),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            total_steps: horizon_epochs * batch_count(labels.len(), cfg.batch_size),
        })
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    /// One pass over the task data. Returns the mean batch loss.
    pub fn run_epoch(&mut self, enc: &mut DualEncoder) -> Result<f64> {
        let mut params = enc.params(ParamScope::Adapters);
        let mut total = 0.0;
        let batches = batches(self.labels.len(), self.cfg.batch_size, &mut self.rng);
        let count = batches.len();
        for batch in batches {
            let x = self.raw.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
            let objective = Objective::TextCe {
                labels: &y,
                active: &self.active,
                alignment_weight: self.alignment_weight,
            };
            let (loss, grads) = batch_objective(enc, &x, &self.class_text_raw, objective, ParamScope::Adapters)?;
            let lr = cosine_lr(self.cfg.learning_rate, self.step, self.total_steps);
            self.opt.step(&mut params, &grads, lr);
            enc.set_params(ParamScope::Adapters, &params);
            total += loss;
            self.step += 1;
        }
        enc.epochs_trained += 1;
        Ok(total / count as f64)
    }
}

/// Fine-tunes the adapters for exactly `cfg.epochs` epochs on one task. With
/// `mask_old` (or `LossMode::MaskedCe`) logits of `classes.old` are excluded
/// from the cross-entropy, and every label must belong to `classes.current`.
pub fn finetune_task(
    enc: &DualEncoder,
    raw: &Matrix,
    labels: &[usize],
    class_text_raw: &Matrix,
    classes: &TaskClasses,
    cfg: &TrainConfig,
    mask_old: bool,
) -> Result<DualEncoder> {
    let mut enc = enc.clone();
    let mut tuner = Finetuner::new(&enc, raw, labels, class_text_raw, classes, cfg, mask_old, cfg.epochs)?;
    for _ in 0..cfg.epochs {
        tuner.run_epoch(&mut enc)?;
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    #[test]
    fn batches_never_leave_a_single_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batches(9, 4, &mut rng);
        assert_eq!(b.len(), 2);
        assert_eq!(b.len(), batch_count(9, 4));
        assert!(b.iter().all(|x| x.len() >= 2));
        assert_eq!(batch_count(8, 4), 2);
        assert_eq!(batch_count(3, 4), 1);
    }

    #[test]
    fn params_round_trip() {
        let mut enc = DualEncoder::new(EncoderConfig::new(3, 4, 2, 1)).unwrap();
        enc.attach_adapters(1, 2).unwrap();
        for scope in [ParamScope::Base, ParamScope::Adapters] {
            let p = enc.params(scope);
            let mut other = enc.clone();
            other.set_params(scope, &p);
            assert!((other.logit_scale - enc.logit_scale).abs() < 1e-12);
            other.logit_scale = enc.logit_scale;
            assert_eq!(other, enc);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-17);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }
}
