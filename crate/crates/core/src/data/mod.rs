//! Labeled unit-norm embedding tables, task splits, and the synthetic
//! two-cone data generator.

mod format;
mod synthetic;

pub use format::{read_table, sidecar_path, write_table, FORMAT_VERSION, MAGIC};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticData};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};

/// Tolerance for the in-memory unit-norm invariant.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Image),
            1 => Some(Modality::Text),
            _ => None,
        }
    }
}

/// Feature vectors of one modality, one per row, each with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vectors: Matrix,
    labels: Vec<usize>,
    class_names: Option<Vec<String>>,
    modality: Modality,
}

impl EmbeddingTable {
    /// Wraps already-normalized rows. Rejects rows off the unit sphere by more
    /// than [`UNIT_NORM_TOLERANCE`].
    pub fn new(vectors: Matrix, labels: Vec<usize>, modality: Modality) -> Result<Self> {
        Self::with_tolerance(vectors, labels, modality, UNIT_NORM_TOLERANCE)
    }

    pub(crate) fn with_tolerance(
        vectors: Matrix,
        labels: Vec<usize>,
        modality: Modality,
        tolerance: f64,
    ) -> Result<Self> {
        if labels.len() != vectors.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                vectors.rows()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("embedding table"));
        }
        for r in 0..vectors.rows() {
            let n = norm(vectors.row(r));
            if (n - 1.0).abs() > tolerance {
                return Err(Error::NonUnitRow { row: r, norm: n });
            }
        }
        Ok(Self {
            vectors,
            labels,
            class_names: None,
            modality,
        })
    }

    /// Normalizes each row of `raw` and wraps the result.
    pub fn from_unnormalized(raw: &Matrix, labels: Vec<usize>, modality: Modality) -> Result<Self> {
        let mut vectors = raw.clone();
        for r in 0..vectors.rows() {
            let row = vectors.row_mut(r);
            let n = norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroVector);
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self::new(vectors, labels, modality)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if let Some(&label) = self.labels.iter().find(|&&l| l >= names.len()) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: names.len(),
            });
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Number of classes: the sidecar class list when present, otherwise one
    /// past the largest label.
    pub fn num_classes(&self) -> usize {
        match &self.class_names {
            Some(names) => names.len(),
            None => self.labels.iter().max().map_or(0, |m| m + 1),
        }
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == class).then_some(i))
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            vectors: self.vectors.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            modality: self.modality,
        }
    }

    /// Rows whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.select(&idx)
    }

    /// Rounds every entry through `f32`, giving the table exactly the values
    /// the on-disk format can store.
    pub fn quantize_f32(&self) -> Self {
        let mut out = self.clone();
        for v in out.vectors.data_mut() {
            *v = f64::from(*v as f32);
        }
        out
    }
}

/// Ordered, pairwise disjoint class sets, one per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSplit {
    pub fn new(tasks: Vec<Vec<usize>>) -> Result<Self> {
        let split = Self { tasks };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (t, classes) in self.tasks.iter().enumerate() {
            if classes.is_empty() {
                return Err(Error::InvalidConfig(format!("task {t} has no classes")));
            }
            for &c in classes {
                if !seen.insert(c) {
                    return Err(Error::InvalidConfig(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of tasks `0..=task`, in task order.
    pub fn seen_through(&self, task: usize) -> Vec<usize> {
        self.tasks[..=task].iter().flatten().copied().collect()
    }

    /// Classes of tasks before `task`.
    pub fn old_before(&self, task: usize) -> Vec<usize> {
        self.tasks[..task].iter().flatten().copied().collect()
    }

    pub fn all_classes(&self) -> Vec<usize> {
        self.tasks.iter().flatten().copied().collect()
    }
}

/// Shuffles `0..num_classes` with `seed` and cuts it into `num_tasks`
/// near-equal consecutive groups; remainder classes go to the earliest tasks.
pub fn split_tasks(num_classes: usize, num_tasks: usize, seed: u64) -> Result<TaskSplit> {
    if num_tasks == 0 {
        return Err(Error::InvalidConfig("num_tasks must be positive".into()));
    }
    if num_tasks > num_classes {
        return Err(Error::InvalidConfig(format!(
            "{num_tasks} tasks cannot be formed from {num_classes} classes"
        )));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = num_classes / num_tasks;
    let extra = num_classes % num_tasks;
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut start = 0;
    for t in 0..num_tasks {
        let size = base + usize::from(t < extra);
        tasks.push(order[start..start + size].to_vec());
        start += size;
    }
    TaskSplit::new(tasks)
}

/// Per-class deterministic train/test split. Each class keeps at least one
/// training row; `test_fraction` of its rows (rounded) go to the test side.
pub fn holdout_split(labels: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).min(idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}
