//! Adaptive epoch budget: fine-tune the first task one epoch at a time and
//! stop once the negative-pair similarity has drifted by `alpha` relative to
//! the untrained model. The last epoch still under the threshold (at least 1)
//! becomes the budget for every task.

use serde::{Deserialize, Serialize};

use crate::encoder::{finetune_task, DualEncoder, Finetuner, TaskClasses, TrainConfig};
use crate::error::{Error, Result};
use crate::gapmetrics::{measure_gap, relative_delta};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreservationConfig {
    pub alpha: f64,
    pub max_probe_epochs: usize,
}

impl Default for PreservationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.10,
            max_probe_epochs: 20,
        }
    }
}

impl PreservationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig("alpha must be positive".into()));
        }
        if self.max_probe_epochs == 0 {
            return Err(Error::InvalidConfig("max_probe_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Training rows of one task plus its class bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub raw: Matrix,
    pub labels: Vec<usize>,
    pub classes: TaskClasses,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub epoch: usize,
    pub neg: f64,
    pub delta: f64,
    pub pos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEstimate {
    pub epochs: usize,
    /// Epoch 0 (untrained) first, then one record per probed epoch.
    pub probe_trace: Vec<ProbeRecord>,
    /// The probe hit `max_probe_epochs` without the drift reaching `alpha`.
    pub capped: bool,
}

impl EpochEstimate {
    pub const CSV_HEADER: &'static str = "epoch,neg,delta";

    pub fn trace_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.probe_trace {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.neg, r.delta));
        }
        out
    }
}

/// Measures pos/neg of `enc` on the task's images against the text rows of
/// the classes in `active`.
pub fn task_gap(enc: &DualEncoder, task: &TaskData, class_text_raw: &Matrix, active: &[bool]) -> Result<(f64, f64)> {
    let classes: Vec<usize> = (0..active.len()).filter(|&c| active[c]).collect();
    let texts = enc.embed_texts(class_text_raw)?;
    let texts = texts.filter_classes(&classes);
    let images = enc.embed_images(&task.raw, task.labels.clone())?;
    let report = measure_gap(&images, &texts)?;
    Ok((report.pos, report.neg))
}

/// Probes the first task. neg is taken over every class text, not only the
/// task's own classes. Returns the estimate and the model trained for exactly
/// `estimate.epochs` epochs (a snapshot, not the over-trained probe model
/// that triggered the stop).
pub fn estimate_epochs(
    enc: &DualEncoder,
    first_task: &TaskData,
    class_text_raw: &Matrix,
    cfg: &PreservationConfig,
    train_cfg: &TrainConfig,
    mask_old: bool,
) -> Result<(EpochEstimate, DualEncoder)> {
    if cfg.max_probe_epochs == 0 {
        return Err(Error::InvalidConfig("max_probe_epochs must be positive".into()));
    }
    if first_task.labels.is_empty() {
        return Err(Error::Empty("first task data"));
    }
    let mut model = enc.clone();
    let mut tuner = Finetuner::new(
        &model,
        &first_task.raw,
        &first_task.labels,
        class_text_raw,
        &first_task.classes,
        train_cfg,
        mask_old,
        cfg.max_probe_epochs,
    )?;
    let all = vec![true; class_text_raw.rows()];

    let (pos0, neg0) = task_gap(&model, first_task, class_text_raw, &all)?;
    let mut trace = vec![ProbeRecord {
        epoch: 0,
        neg: neg0,
        delta: 0.0,
        pos: pos0,
    }];
    let mut snapshots = vec![model.clone()];
    let mut last_below = 0;
    let mut stopped = false;
    for epoch in 1..=cfg.max_probe_epochs {
        tuner.run_epoch(&mut model)?;
        let (pos, neg) = task_gap(&model, first_task, class_text_raw, &all)?;
        let delta = relative_delta(neg, neg0)?;
        trace.push(ProbeRecord { epoch, neg, delta, pos });
        snapshots.push(model.clone());
        if delta >= cfg.alpha {
            stopped = true;
            break;
        }
        last_below = epoch;
    }
    let epochs = last_below.max(1);
    let estimate = EpochEstimate {
        epochs,
        probe_trace: trace,
        capped: !stopped,
    };
    Ok((estimate, snapshots.swap_remove(epochs)))
}

/// Fine-tunes each task in order for exactly `epochs` epochs with masked
/// cross-entropy.
pub fn train_remaining_tasks(
    enc: &DualEncoder,
    tasks: &[TaskData],
    class_text_raw: &Matrix,
    epochs: usize,
    train_cfg: &TrainConfig,
) -> Result<DualEncoder> {
    let cfg = TrainConfig {
        epochs,
        ..train_cfg.clone()
    };
    let mut model = enc.clone();
    for (t, task) in tasks.iter().enumerate() {
        model = finetune_task(&model, &task.raw, &task.labels, class_text_raw, &task.classes, &cfg, true)
            .map_err(|e| e.in_task(t + 1))?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{holdout_split, split_tasks};
    use crate::encoder::LossMode;
    use crate::protocol::{load_dataset, pretrain_model, RunConfig};

    struct Fixture {
        enc: DualEncoder,
        tasks: Vec<TaskData>,
        texts: Matrix,
        train_cfg: TrainConfig,
    }

    fn fixture() -> &'static Fixture {
        static FIXTURE: std::sync::OnceLock<Fixture> = std::sync::OnceLock::new();
        FIXTURE.get_or_init(build_fixture)
    }

    fn build_fixture() -> Fixture {
        let mut cfg = RunConfig::default();
        cfg.pretrain.epochs = 5;
        let data = load_dataset(&cfg.data).unwrap();
        let (train, _) = holdout_split(&data.labels, cfg.data.test_fraction, cfg.seed);
        let mut enc = pretrain_model(&cfg, &data, &train).unwrap();
        enc.attach_adapters(4, 1).unwrap();
        let split = split_tasks(data.num_classes(), cfg.num_tasks, cfg.seed).unwrap();
        let tasks = (0..split.num_tasks())
            .map(|t| {
                let classes = TaskClasses {
                    current: split.tasks[t].clone(),
                    old: split.old_before(t),
                };
                let rows: Vec<usize> =
                    train.iter().copied().filter(|&i| classes.current.contains(&data.labels[i])).collect();
                TaskData {
                    raw: data.raw_image.select_rows(&rows),
                    labels: rows.iter().map(|&i| data.labels[i]).collect(),
                    classes,
                }
            })
            .collect();
        let mut train_cfg = TrainConfig::new(LossMode::MaskedCe, 0.01, 1, 3);
        train_cfg.optimizer = crate::encoder::OptimizerKind::Adam;
        Fixture {
            enc,
            tasks,
            texts: data.raw_text,
            train_cfg,
        }
    }

    fn probe(f: &Fixture, alpha: f64, cap: usize) -> (EpochEstimate, DualEncoder) {
        let cfg = PreservationConfig {
            alpha,
            max_probe_epochs: cap,
        };
        estimate_epochs(&f.enc, &f.tasks[0], &f.texts, &cfg, &f.train_cfg, true).unwrap()
    }

    #[test]
    fn unreachable_alpha_runs_to_the_cap() {
        let f = fixture();
        let (est, model) = probe(f, 1e9, 20);
        assert!(est.capped);
        assert_eq!(est.epochs, 20);
        assert_eq!(est.probe_trace.len(), 21);
        assert_eq!(model.epochs_trained, f.enc.epochs_trained + 20);
    }

    #[test]
    fn zero_alpha_clamps_to_one_epoch() {
        let f = fixture();
        let (est, model) = probe(f, 0.0, 20);
        assert_eq!(est.epochs, 1);
        assert!(!est.capped);
        assert_eq!(est.probe_trace.len(), 2);
        assert_eq!(model.epochs_trained, f.enc.epochs_trained + 1);
    }

    #[test]
    fn trace_deltas_and_rewind() {
        let f = fixture();
        let (est, model) = probe(f, 0.10, 20);
        let neg0 = est.probe_trace[0].neg;
        for (i, r) in est.probe_trace.iter().enumerate() {
            assert_eq!(r.epoch, i);
            assert_eq!(r.delta, relative_delta(r.neg, neg0).unwrap());
        }
        let stop = est.probe_trace.last().unwrap();
        assert!(stop.delta >= 0.10);
        assert!(est.probe_trace[1..est.probe_trace.len() - 1].iter().all(|r| r.delta < 0.10));
        assert!(est.epochs < stop.epoch || est.epochs == 1);
        assert_eq!(model.epochs_trained, f.enc.epochs_trained + est.epochs as u64);
        assert!(est.trace_csv().starts_with("epoch,neg,delta\n0,"));
    }

    #[test]
    fn probing_is_deterministic() {
        let f = fixture();
        let (a, ma) = probe(f, 0.10, 20);
        let (b, mb) = probe(f, 0.10, 20);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn remaining_tasks_get_exact_epoch_counts() {
        let f = fixture();
        let unchanged = train_remaining_tasks(&f.enc, &[], &f.texts, 3, &f.train_cfg).unwrap();
        assert_eq!(unchanged, f.enc);
        let trained = train_remaining_tasks(&f.enc, &f.tasks[1..4], &f.texts, 1, &f.train_cfg).unwrap();
        assert_eq!(trained.epochs_trained, f.enc.epochs_trained + 3);
    }

    #[test]
    fn zero_probe_cap_rejected() {
        let f = fixture();
        let cfg = PreservationConfig {
            alpha: 0.1,
            max_probe_epochs: 0,
        };
        assert!(estimate_epochs(&f.enc, &f.tasks[0], &f.texts, &cfg, &f.train_cfg, true).is_err());
        assert!(cfg.validate().is_err());
    }
}
