//! End-to-end class-incremental driver: pretrain, then per task fine-tune,
//! optionally grow the visual classifier, and evaluate over every class seen
//! so far without task identity.

mod config;
mod report;

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    ClassifierConfig, DataConfig, FinetuneConfig, MethodVariant, ModelConfig, PretrainConfig, RunConfig,
    TablePaths,
};
pub use report::{gap_trace_csv, per_task_csv, render_report, SeedSummary, SweepSummary};

use crate::compensation::{ensemble_predict, CompensationClassifier, EnsembleConfig};
use crate::data::{generate_synthetic, holdout_split, read_table, split_tasks, EmbeddingTable};
use crate::encoder::{
    argmax, load_checkpoint, pretrain_contrastive, save_checkpoint, DualEncoder, EncoderConfig, LossMode, TaskClasses,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::gapmetrics::{measure_gap, GapReport};
use crate::linalg::Matrix;
use crate::preservation::{estimate_epochs, EpochEstimate, TaskData};
use crate::subspace::{analyze_subspaces, SubspaceAnalysis, DEFAULT_ENERGY};

/// Raw encoder inputs for every sample plus one text input row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub raw_image: Matrix,
    pub labels: Vec<usize>,
    pub raw_text: Matrix,
    /// Separate pretraining images. Without them pretraining uses the
    /// training split.
    pub pretrain: Option<(Matrix, Vec<usize>)>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.raw_text.rows()
    }

    fn subset(&self, rows: &[usize]) -> (Matrix, Vec<usize>) {
        (self.raw_image.select_rows(rows), rows.iter().map(|&i| self.labels[i]).collect())
    }
}

pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset> {
    match &cfg.tables {
        None => {
            let data = generate_synthetic(&cfg.synthetic)?;
            Ok(Dataset {
                raw_image: data.raw_image,
                labels: data.image.labels().to_vec(),
                raw_text: data.raw_text,
                pretrain: Some((data.pretrain_raw_image, data.pretrain_labels)),
            })
        }
        Some(TablePaths { image, text }) => {
            let image = read_table(image)?;
            let text = read_table(text)?;
            if image.dim() != text.dim() {
                return Err(Error::DimensionMismatch("image and text tables differ in dim".into()));
            }
            // text rows are looked up by class index
            let mut order: Vec<usize> = (0..text.len()).collect();
            order.sort_by_key(|&i| text.labels()[i]);
            if order.iter().enumerate().any(|(k, &i)| text.labels()[i] != k) {
                return Err(Error::InvalidConfig("text table needs exactly one row per class 0..K".into()));
            }
            if let Some(&label) = image.labels().iter().find(|&&l| l >= text.len()) {
                return Err(Error::LabelOutOfRange {
                    label,
                    num_classes: text.len(),
                });
            }
            Ok(Dataset {
                raw_image: image.vectors().clone(),
                labels: image.labels().to_vec(),
                raw_text: text.vectors().select_rows(&order),
                pretrain: None,
            })
        }
    }
}

/// Derives an independent stream seed so no two stochastic components share
/// a generator state.
fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_ADAPTER: u64 = 1;
const STREAM_FINETUNE: u64 = 2;
const STREAM_CLASSIFIER: u64 = 3;

/// Everything pretraining depends on. Its hash keys the checkpoint cache.
#[derive(Serialize)]
struct PretrainKey<'a> {
    data: &'a DataConfig,
    model: &'a ModelConfig,
    pretrain: &'a PretrainConfig,
    seed: u64,
}

pub fn pretrain_key(cfg: &RunConfig) -> String {
    let key = PretrainKey {
        data: &cfg.data,
        model: &cfg.model,
        pretrain: &cfg.pretrain,
        seed: cfg.seed,
    };
    let bytes = serde_json::to_vec(&key).expect("key serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Contrastive pretraining on the dataset's pretraining corpus, or on the
/// training split of every class when it has none.
pub fn pretrain_model(cfg: &RunConfig, data: &Dataset, train_rows: &[usize]) -> Result<DualEncoder> {
    let mut enc_cfg = EncoderConfig::new(data.raw_image.cols(), data.raw_text.cols(), cfg.model.embed_dim, cfg.seed);
    if cfg.model.hidden_dim > 0 {
        enc_cfg.hidden_dim = cfg.model.hidden_dim;
    }
    enc_cfg.init_logit_scale = cfg.model.init_logit_scale;
    let enc = DualEncoder::new(enc_cfg)?;
    let mut train_cfg = TrainConfig::new(
        LossMode::ContrastivePretrain,
        cfg.pretrain.learning_rate,
        cfg.pretrain.epochs,
        cfg.seed,
    );
    train_cfg.batch_size = cfg.pretrain.batch_size;
    train_cfg.optimizer = cfg.pretrain.optimizer;
    let (raw, labels) = match &data.pretrain {
        Some((raw, labels)) => (raw.clone(), labels.clone()),
        None => data.subset(train_rows),
    };
    Ok(pretrain_contrastive(&enc, &raw, &data.raw_text, &labels, &train_cfg)?.encoder)
}

/// Pretrained encoders keyed by [`pretrain_key`], kept in memory and
/// optionally mirrored to checkpoint files in `dir`.
#[derive(Debug, Default)]
pub struct PretrainCache {
    dir: Option<PathBuf>,
    models: HashMap<String, DualEncoder>,
}

impl PretrainCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            models: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn get_or_train(&mut self, cfg: &RunConfig, data: &Dataset, train_rows: &[usize]) -> Result<DualEncoder> {
        let key = pretrain_key(cfg);
        if let Some(enc) = self.models.get(&key) {
            return Ok(enc.clone());
        }
        let stem = self.dir.as_ref().map(|d| d.join(format!("pretrain-{key}")));
        let enc = match &stem {
            Some(stem) if stem.with_extension("json").exists() => load_checkpoint(stem)?.encoder,
            _ => {
                let enc = pretrain_model(cfg, data, train_rows)?;
                if let Some(stem) = &stem {
                    std::fs::create_dir_all(stem.parent().expect("stem has a parent"))
                        .map_err(|e| Error::io(stem, e))?;
                    save_checkpoint(stem, &enc, None)?;
                }
                enc
            }
        };
        self.models.insert(key, enc.clone());
        Ok(enc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: MethodVariant,
    pub seed: u64,
    pub task_classes: Vec<Vec<usize>>,
    pub epochs_per_task: Vec<usize>,
    pub per_task_accuracy: Vec<f64>,
    pub avg: f64,
    pub last: f64,
    /// Gap of the pretrained model on all training images and class texts.
    pub pretrain_gap: GapReport,
    /// The same measurement after each task.
    pub gap_trace: Vec<GapReport>,
    pub probe: Option<EpochEstimate>,
    pub subspace: Option<SubspaceAnalysis>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// A run's result plus the final model state.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub encoder: DualEncoder,
    pub classifier: Option<CompensationClassifier>,
}

/// Fraction of rows whose argmax column maps to the true label.
pub fn accuracy(scores: &Matrix, column_labels: &[usize], labels: &[usize]) -> Result<f64> {
    if scores.rows() != labels.len() || scores.cols() != column_labels.len() {
        return Err(Error::DimensionMismatch("scores vs labels".into()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let correct = (0..scores.rows())
        .filter(|&r| column_labels[argmax(scores.row(r))] == labels[r])
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy over `seen` classes with no task identity: the ensemble when a
/// classifier is given, the text head otherwise. `texts` holds one row per
/// class (any superset of `seen`).
pub fn evaluate(
    enc: &DualEncoder,
    clf: Option<&CompensationClassifier>,
    raw: &Matrix,
    labels: &[usize],
    texts: &EmbeddingTable,
    seen: &[usize],
    ensemble: &EnsembleConfig,
) -> Result<f64> {
    if seen.is_empty() {
        return Err(Error::NoActiveClasses);
    }
    if let Some(&label) = labels.iter().find(|l| !seen.contains(l)) {
        return Err(Error::InactiveLabel { label });
    }
    let texts = texts.filter_classes(seen);
    let scores = match clf {
        Some(clf) => ensemble_predict(enc, clf, raw, &texts, ensemble)?,
        None => enc.classify_text(raw, &texts, None)?,
    };
    accuracy(&scores, texts.labels(), labels)
}

pub fn run(cfg: &RunConfig) -> Result<RunResult> {
    Ok(run_with_cache(cfg, &mut PretrainCache::new())?.result)
}

pub fn run_with_cache(cfg: &RunConfig, cache: &mut PretrainCache) -> Result<RunOutput> {
    let data = load_dataset(&cfg.data)?;
    run_on(cfg, &data, cache)
}

pub fn run_on(cfg: &RunConfig, data: &Dataset, cache: &mut PretrainCache) -> Result<RunOutput> {
    let start = Instant::now();
    cfg.validate()?;
    let method = cfg.method;
    let num_classes = data.num_classes();
    let (train_rows, test_rows) = holdout_split(&data.labels, cfg.data.test_fraction, cfg.seed);
    let split = split_tasks(num_classes, cfg.num_tasks, cfg.seed)?;

    let mut enc = cache.get_or_train(cfg, data, &train_rows)?;
    enc.attach_adapters(cfg.model.adapter_rank, stream_seed(cfg.seed, STREAM_ADAPTER, 0))?;

    let (train_raw, train_labels) = data.subset(&train_rows);
    let (test_raw, test_labels) = data.subset(&test_rows);
    let full_gap = |enc: &DualEncoder| -> Result<GapReport> {
        measure_gap(&enc.embed_images(&train_raw, train_labels.clone())?, &enc.embed_texts(&data.raw_text)?)
    };
    let pretrain_gap = full_gap(&enc)?;

    let loss_mode = match method {
        MethodVariant::Alignment => LossMode::CePlusAlignment,
        _ => LossMode::MaskedCe,
    };
    let train_cfg_for = |task: usize, epochs: usize| TrainConfig {
        loss_mode,
        learning_rate: cfg.finetune.learning_rate,
        epochs,
        batch_size: cfg.finetune.batch_size,
        alignment_weight: cfg.finetune.alignment_weight,
        seed: stream_seed(cfg.seed, STREAM_FINETUNE, task as u64),
        optimizer: cfg.finetune.optimizer,
    };

    let mut clf = if method.compensates() {
        Some(CompensationClassifier::new(enc.embed_dim(), cfg.classifier.scale)?)
    } else {
        None
    };
    let mut epochs = cfg.finetune.fixed_epochs;
    let mut probe = None;
    let mut epochs_per_task = Vec::new();
    let mut per_task_accuracy = Vec::new();
    let mut gap_trace = Vec::new();

    for t in 0..split.num_tasks() {
        let mut step = || -> Result<()> {
            let classes = TaskClasses {
                current: split.tasks[t].clone(),
                old: split.old_before(t),
            };
            let rows: Vec<usize> = (0..train_labels.len())
                .filter(|&i| classes.current.contains(&train_labels[i]))
                .collect();
            let task = TaskData {
                raw: train_raw.select_rows(&rows),
                labels: rows.iter().map(|&i| train_labels[i]).collect(),
                classes,
            };

            if t == 0 && method.preserves_gap() {
                let (estimate, model) = estimate_epochs(
                    &enc,
                    &task,
                    &data.raw_text,
                    &cfg.preservation,
                    &train_cfg_for(t, cfg.preservation.max_probe_epochs),
                    true,
                )?;
                epochs = estimate.epochs;
                probe = Some(estimate);
                enc = model;
            } else {
                enc = crate::encoder::finetune_task(
                    &enc,
                    &task.raw,
                    &task.labels,
                    &data.raw_text,
                    &task.classes,
                    &train_cfg_for(t, epochs),
                    true,
                )?;
            }
            epochs_per_task.push(epochs);

            if let Some(c) = clf.as_mut() {
                let features = enc.embed_images(&task.raw, task.labels.clone())?;
                let grown = c.init_new_classes(&features, &task.classes.current)?;
                *c = grown.train_classifier(
                    &features,
                    cfg.classifier.epochs,
                    cfg.classifier.learning_rate,
                    stream_seed(cfg.seed, STREAM_CLASSIFIER, t as u64),
                )?;
            }

            let seen = split.seen_through(t);
            let eval_rows: Vec<usize> = (0..test_labels.len())
                .filter(|&i| seen.contains(&test_labels[i]))
                .collect();
            let eval_labels: Vec<usize> = eval_rows.iter().map(|&i| test_labels[i]).collect();
            let texts = enc.embed_texts(&data.raw_text)?;
            per_task_accuracy.push(evaluate(
                &enc,
                clf.as_ref(),
                &test_raw.select_rows(&eval_rows),
                &eval_labels,
                &texts,
                &seen,
                &cfg.ensemble,
            )?);
            gap_trace.push(full_gap(&enc)?);
            Ok(())
        };
        step().map_err(|e| e.in_task(t + 1))?;
    }

    let subspace = match (&clf, cfg.analyze_subspace) {
        (Some(c), true) => {
            let features = enc.embed_images(&train_raw, train_labels.clone())?;
            let texts = enc.embed_texts(&data.raw_text)?.select(c.class_ids());
            Some(analyze_subspaces(
                &features,
                &texts.vectors().transpose(),
                c.weights(),
                DEFAULT_ENERGY,
            )?)
        }
        _ => None,
    };

    let avg = per_task_accuracy.iter().sum::<f64>() / per_task_accuracy.len() as f64;
    let last = *per_task_accuracy.last().expect("at least one task");
    let result = RunResult {
        method,
        seed: cfg.seed,
        task_classes: split.tasks.clone(),
        epochs_per_task,
        per_task_accuracy,
        avg,
        last,
        pretrain_gap,
        gap_trace,
        probe,
        subspace,
        wall_time: start.elapsed(),
    };
    Ok(RunOutput {
        result,
        encoder: enc,
        classifier: clf,
    })
}

/// Runs `cfg` once per seed, sharing `cache`.
pub fn run_seeds(cfg: &RunConfig, seeds: &[u64], cache: &mut PretrainCache) -> Result<SweepSummary> {
    if seeds.is_empty() {
        return Err(Error::Empty("seed list"));
    }
    let data = load_dataset(&cfg.data)?;
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = RunConfig { seed, ..cfg.clone() };
        results.push(run_on(&cfg, &data, cache)?.result);
    }
    Ok(SweepSummary::from_results(&results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticConfig;

    fn small() -> RunConfig {
        RunConfig {
            num_tasks: 2,
            data: DataConfig {
                synthetic: SyntheticConfig {
                    num_classes: 4,
                    samples_per_class: 10,
                    raw_dim: 8,
                    ..Default::default()
                },
                ..Default::default()
            },
            model: ModelConfig {
                embed_dim: 6,
                adapter_rank: 2,
                ..Default::default()
            },
            pretrain: PretrainConfig {
                epochs: 3,
                ..Default::default()
            },
            finetune: FinetuneConfig {
                fixed_epochs: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn hand_built_accuracy() {
        let scores = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3], vec![0.6, 0.4]]).unwrap();
        // columns stand for classes 3 and 5
        assert_eq!(accuracy(&scores, &[3, 5], &[3, 5, 5, 5]).unwrap(), 0.5);
        assert_eq!(accuracy(&scores, &[3, 5], &[3, 5, 3, 3]).unwrap(), 1.0);
    }

    #[test]
    fn fixed_prediction_scores_class_frequency() {
        let scores = Matrix::from_fn(5, 3, |_, c| if c == 1 { 1.0 } else { 0.0 });
        assert_eq!(accuracy(&scores, &[0, 1, 2], &[1, 0, 1, 2, 1]).unwrap(), 0.6);
    }

    #[test]
    fn evaluate_rejects_empty_seen() {
        let cfg = small();
        let data = load_dataset(&cfg.data).unwrap();
        let enc = pretrain_model(&cfg, &data, &[0, 1, 2]).unwrap();
        let texts = enc.embed_texts(&data.raw_text).unwrap();
        let r = evaluate(&enc, None, &data.raw_image, &data.labels, &texts, &[], &EnsembleConfig::default());
        assert!(matches!(r, Err(Error::NoActiveClasses)));
    }

    #[test]
    fn single_task_avg_equals_last() {
        let cfg = RunConfig {
            num_tasks: 1,
            method: MethodVariant::Naive,
            ..small()
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.per_task_accuracy.len(), 1);
        assert_eq!(r.avg, r.last);
        assert_eq!(r.avg, r.per_task_accuracy[0]);
    }

    #[test]
    fn variants_share_the_pretrained_model() {
        let mut cache = PretrainCache::new();
        for method in MethodVariant::ALL {
            let cfg = RunConfig { method, ..small() };
            let out = run_with_cache(&cfg, &mut cache).unwrap();
            let r = &out.result;
            assert!((r.avg - r.per_task_accuracy.iter().sum::<f64>() / 2.0).abs() < 1e-12);
            assert_eq!(r.last, r.per_task_accuracy[1]);
            assert_eq!(r.probe.is_some(), method.preserves_gap());
            assert_eq!(out.classifier.is_some(), method.compensates());
            assert_eq!(r.subspace.is_some(), method.compensates());
        }
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn disk_cache_reloads_identical_model() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let data = load_dataset(&cfg.data).unwrap();
        let rows: Vec<usize> = (0..data.labels.len()).collect();
        let a = PretrainCache::with_dir(dir.path()).get_or_train(&cfg, &data, &rows).unwrap();
        let b = PretrainCache::with_dir(dir.path()).get_or_train(&cfg, &data, &rows).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(stream_seed(7, 1, 0), stream_seed(7, 2, 0));
        assert_ne!(stream_seed(7, 2, 0), stream_seed(7, 2, 1));
        assert_eq!(stream_seed(7, 2, 1), stream_seed(7, 2, 1));
    }
}
