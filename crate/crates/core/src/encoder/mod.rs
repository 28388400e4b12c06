//! Toy dual encoder: two tanh MLPs with optional low-rank adapters on every
//! weight matrix, and a shared logit scale.

mod checkpoint;
pub mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ClassifierState};
pub use train::{
    batch_objective, finetune_task, pretrain_contrastive, Finetuner, LossMode, Objective,
    OptimizerKind, ParamScope, Pretrained, TaskClasses, TrainConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingTable, Modality};
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};

pub const MIN_LOGIT_SCALE: f64 = 1.0;
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_input_dim: usize,
    pub text_input_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_logit_scale: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// `hidden = 2 * embed_dim`, logit scale 10.
    pub fn new(image_input_dim: usize, text_input_dim: usize, embed_dim: usize, seed: u64) -> Self {
        Self {
            image_input_dim,
            text_input_dim,
            embed_dim,
            hidden_dim: 2 * embed_dim,
            init_logit_scale: 10.0,
            seed,
        }
    }
}

/// Low-rank update `a · b` added to a frozen weight. `b` starts at zero so a
/// freshly attached adapter does not change the layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    /// `d_out x r`
    pub a: Matrix,
    /// `r x d_in`
    pub b: Matrix,
}

impl LowRankAdapter {
    pub fn new(d_out: usize, d_in: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (rank as f64).sqrt();
        let a = Matrix::from_fn(d_out, rank, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        });
        Self {
            a,
            b: Matrix::zeros(rank, d_in),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn delta(&self) -> Matrix {
        self.a.matmul(&self.b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `d_out x d_in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub adapter: Option<LowRankAdapter>,
}

impl Linear {
    fn init(d_out: usize, d_in: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = Matrix::from_fn(d_out, d_in, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        });
        Self {
            weight,
            bias: vec![0.0; d_out],
            adapter: None,
        }
    }

    pub fn effective_weight(&self) -> Matrix {
        match &self.adapter {
            Some(ad) => self.weight.add(&ad.delta()),
            None => self.weight.clone(),
        }
    }

    fn forward(&self, weight: &Matrix, x: &Matrix) -> Matrix {
        let mut out = x.matmul_t(weight);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub adapter_a: Option<Matrix>,
    pub adapter_b: Option<Matrix>,
}

/// `raw -> tanh(W1 x + b1) -> W2 h + b2`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

pub(crate) struct MlpCache {
    input: Matrix,
    hidden: Matrix,
    w_output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub hidden: LinearGrad,
    pub output: LinearGrad,
}

impl Mlp {
    fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::init(d_hidden, d_in, rng),
            output: Linear::init(d_out, d_hidden, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.output.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_cached(x).0
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> (Matrix, MlpCache) {
        let w_hidden = self.hidden.effective_weight();
        let w_output = self.output.effective_weight();
        let mut h = self.hidden.forward(&w_hidden, x);
        h.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let out = self.output.forward(&w_output, &h);
        let cache = MlpCache {
            input: x.clone(),
            hidden: h,
            w_output,
        };
        (out, cache)
    }

    pub(crate) fn backward(&self, cache: &MlpCache, d_out: &Matrix) -> MlpGrad {
        let d_w_out = d_out.t_matmul(&cache.hidden);
        let d_b_out = column_sums(d_out);
        let mut d_h = d_out.matmul(&cache.w_output);
        for (g, h) in d_h.data_mut().iter_mut().zip(cache.hidden.data()) {
            *g *= 1.0 - h * h;
        }
        let d_w_hidden = d_h.t_matmul(&cache.input);
        let d_b_hidden = column_sums(&d_h);
        MlpGrad {
            hidden: linear_grad(&self.hidden, d_w_hidden, d_b_hidden),
            output: linear_grad(&self.output, d_w_out, d_b_out),
        }
    }

    fn layers(&self) -> [&Linear; 2] {
        [&self.hidden, &self.output]
    }

    fn layers_mut(&mut self) -> [&mut Linear; 2] {
        [&mut self.hidden, &mut self.output]
    }
}

fn linear_grad(layer: &Linear, d_weight: Matrix, d_bias: Vec<f64>) -> LinearGrad {
    let (adapter_a, adapter_b) = match &layer.adapter {
        Some(ad) => (
            Some(d_weight.matmul_t(&ad.b)),
            Some(ad.a.t_matmul(&d_weight)),
        ),
        None => (None, None),
    };
    LinearGrad {
        weight: d_weight,
        bias: d_bias,
        adapter_a,
        adapter_b,
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Image and text towers plus the logit scale used by the text head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub image_net: Mlp,
    pub text_net: Mlp,
    pub logit_scale: f64,
    /// Fine-tuning epochs applied since construction.
    pub epochs_trained: u64,
}

impl DualEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        if config.embed_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        if !(config.init_logit_scale > 0.0) {
            return Err(Error::InvalidConfig("logit scale must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let image_net = Mlp::init(config.image_input_dim, config.hidden_dim, config.embed_dim, &mut rng);
        let text_net = Mlp::init(config.text_input_dim, config.hidden_dim, config.embed_dim, &mut rng);
        Ok(Self {
            logit_scale: config.init_logit_scale.clamp(MIN_LOGIT_SCALE, MAX_LOGIT_SCALE),
            config,
            image_net,
            text_net,
            epochs_trained: 0,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Attaches a fresh rank-`rank` adapter to every weight matrix of both
    /// towers, replacing any existing ones.
    pub fn attach_adapters(&mut self, rank: usize, seed: u64) -> Result<()> {
        if rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for net in [&mut self.image_net, &mut self.text_net] {
            for layer in net.layers_mut() {
                let (d_out, d_in) = layer.weight.shape();
                layer.adapter = Some(LowRankAdapter::new(d_out, d_in, rank, &mut rng));
            }
        }
        Ok(())
    }

    pub fn has_adapters(&self) -> bool {
        [&self.image_net, &self.text_net]
            .iter()
            .all(|n| n.layers().iter().all(|l| l.adapter.is_some()))
    }

    /// Folds every adapter into its base weight and removes it.
    pub fn merge_adapters(&mut self) {
        for net in [&mut self.image_net, &mut self.text_net] {
            for layer in net.layers_mut() {
                if let Some(ad) = layer.adapter.take() {
                    layer.weight = layer.weight.add(&ad.delta());
                }
            }
        }
    }

    fn check_input(net: &Mlp, raw: &Matrix, what: &str) -> Result<()> {
        if raw.cols() != net.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "{what} encoder expects {} inputs, got {}",
                net.input_dim(),
                raw.cols()
            )));
        }
        Ok(())
    }

    /// Row-normalized image embeddings.
    pub fn image_embeddings(&self, raw: &Matrix) -> Result<Matrix> {
        Self::check_input(&self.image_net, raw, "image")?;
        normalize_rows(self.image_net.forward(raw))
    }

    pub fn text_embeddings(&self, raw: &Matrix) -> Result<Matrix> {
        Self::check_input(&self.text_net, raw, "text")?;
        normalize_rows(self.text_net.forward(raw))
    }

    pub fn embed_images(&self, raw: &Matrix, labels: Vec<usize>) -> Result<EmbeddingTable> {
        EmbeddingTable::new(self.image_embeddings(raw)?, labels, Modality::Image)
    }

    /// One text row per class; row `k` is labeled `k`.
    pub fn embed_texts(&self, raw: &Matrix) -> Result<EmbeddingTable> {
        EmbeddingTable::new(self.text_embeddings(raw)?, (0..raw.rows()).collect(), Modality::Text)
    }

    /// Text-head probabilities: softmax over `logit_scale * cos(image, text_k)`
    /// for every row of `texts`. Rows whose class label is in `excluded` get a
    /// `-inf` logit and therefore probability exactly zero.
    pub fn classify_text(
        &self,
        image_raw: &Matrix,
        texts: &EmbeddingTable,
        excluded: Option<&[usize]>,
    ) -> Result<Matrix> {
        let emb = self.image_embeddings(image_raw)?;
        text_head_scores(&emb, texts, self.logit_scale, excluded)
    }
}

/// Text-head probabilities for already-normalized image embeddings.
pub fn text_head_scores(
    image_emb: &Matrix,
    texts: &EmbeddingTable,
    logit_scale: f64,
    excluded: Option<&[usize]>,
) -> Result<Matrix> {
    if image_emb.cols() != texts.dim() {
        return Err(Error::DimensionMismatch(format!(
            "image embeddings of dim {} vs text dim {}",
            image_emb.cols(),
            texts.dim()
        )));
    }
    let active: Vec<bool> = texts
        .labels()
        .iter()
        .map(|l| excluded.is_none_or(|ex| !ex.contains(l)))
        .collect();
    if !active.iter().any(|&a| a) {
        return Err(Error::NoActiveClasses);
    }
    let mut logits = image_emb.matmul_t(texts.vectors());
    for r in 0..logits.rows() {
        let row = logits.row_mut(r);
        row.iter_mut().for_each(|v| *v *= logit_scale);
        softmax_in_place(row, &active);
    }
    Ok(logits)
}

/// Softmax restricted to `active` entries; inactive entries become exactly 0.
pub fn softmax_in_place(row: &mut [f64], active: &[bool]) {
    let max = row
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (v, &a) in row.iter_mut().zip(active) {
        if a {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn normalize_rows(mut m: Matrix) -> Result<Matrix> {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(m)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> DualEncoder {
        DualEncoder::new(EncoderConfig::new(6, 5, 4, 3)).unwrap()
    }

    fn raw(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let enc = encoder();
        let x = raw(7, 6, 1);
        let a = enc.embed_images(&x, vec![0; 7]).unwrap();
        let b = enc.embed_images(&x, vec![0; 7]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 4);
        for i in 0..a.len() {
            assert!((norm(a.row(i)) - 1.0).abs() < 1e-6);
        }
        assert!(enc.embed_images(&raw(2, 5, 1), vec![0, 0]).is_err());
    }

    #[test]
    fn zero_init_adapters_leave_outputs_bit_identical() {
        let mut enc = encoder();
        let x = raw(5, 6, 2);
        let t = raw(3, 5, 3);
        let before = (enc.image_embeddings(&x).unwrap(), enc.text_embeddings(&t).unwrap());
        enc.attach_adapters(2, 9).unwrap();
        assert!(enc.has_adapters());
        let after = (enc.image_embeddings(&x).unwrap(), enc.text_embeddings(&t).unwrap());
        assert_eq!(before, after);
    }

    #[test]
    fn adapter_update_has_bounded_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ad = LowRankAdapter::new(6, 5, 2, &mut rng);
        ad.b = raw(2, 5, 5);
        assert_eq!(crate::linalg::rank(&ad.delta()).unwrap(), 2);
    }

    #[test]
    fn classify_text_argmax_and_mask() {
        let texts = EmbeddingTable::new(Matrix::identity(3), vec![0, 1, 2], Modality::Text).unwrap();
        let img = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let scores = text_head_scores(&img, &texts, 10.0, None).unwrap();
        assert_eq!(argmax(scores.row(0)), 1);
        let masked = text_head_scores(&img, &texts, 10.0, Some(&[1])).unwrap();
        assert_eq!(masked[(0, 1)], 0.0);
        assert!((masked.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(
            text_head_scores(&img, &texts, 10.0, Some(&[0, 1, 2])),
            Err(Error::NoActiveClasses)
        ));
    }

    #[test]
    fn classify_text_sums_to_one() {
        let enc = encoder();
        let texts = enc.embed_texts(&raw(4, 5, 6)).unwrap();
        let scores = enc.classify_text(&raw(20, 6, 7), &texts, None).unwrap();
        for r in 0..scores.rows() {
            assert!((scores.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }
}
