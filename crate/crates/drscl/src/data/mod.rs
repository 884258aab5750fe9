//! Task streams: sequential datasets with non-overlapping label spaces plus
//! a disjoint pretraining split.
//!
//! Streams come from the synthetic Gaussian-cluster generator or from files
//! (CSV, IDX). Features are standardized with statistics computed on the
//! pretraining split only, so no statistic of any incremental task leaks
//! into another.

mod csv;
mod idx;

pub use csv::{load_csv_dataset, parse_csv};
pub use idx::{dataset_from_idx, load_idx_dataset, parse_idx_images, parse_idx_labels};

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

/// One labelled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A set of samples sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("feature dimension must be >= 1".into()));
        }
        Ok(Dataset {
            dim,
            samples: Vec::new(),
        })
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.features.len() != self.dim {
            return Err(Error::Contract(format!(
                "sample has dimension {}, dataset expects {}",
                sample.features.len(),
                self.dim
            )));
        }
        if sample.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("sample contains non-finite feature".into()));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Distinct labels present, ascending.
    pub fn classes(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Sample indices grouped by label, ascending label order.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.label).or_default().push(i);
        }
        map
    }

    /// Stack the selected samples into a batch matrix (one row per sample).
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        assert!(!indices.is_empty(), "empty batch");
        let mut m = Matrix::zeros(indices.len(), self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            m.row_mut(r).copy_from_slice(&self.samples[i].features);
            labels.push(self.samples[i].label);
        }
        (m, labels)
    }

    /// Whole dataset as a batch.
    pub fn full_batch(&self) -> (Matrix, Vec<usize>) {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }
}

/// Train/test halves of one class set.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// The sequential task stream plus the disjoint pretraining split.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Split>,
    pub label_spaces: Vec<BTreeSet<usize>>,
    pub pretrain: Split,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.pretrain.train.dim()
    }

    /// Check the disjointness invariants, exhaustively.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.len() != self.label_spaces.len() {
            return Err(Error::Contract("label space count != task count".into()));
        }
        for (a, sa) in self.label_spaces.iter().enumerate() {
            for (b, sb) in self.label_spaces.iter().enumerate() {
                if a != b && !sa.is_disjoint(sb) {
                    return Err(Error::Contract(format!(
                        "label spaces of tasks {a} and {b} overlap"
                    )));
                }
            }
        }
        let all_cl: BTreeSet<usize> = self.label_spaces.iter().flatten().copied().collect();
        let pretrain_classes: BTreeSet<usize> = self
            .pretrain
            .train
            .classes()
            .union(&self.pretrain.test.classes())
            .copied()
            .collect();
        if !all_cl.is_disjoint(&pretrain_classes) {
            return Err(Error::Contract(
                "pretraining classes overlap incremental classes".into(),
            ));
        }
        for (t, split) in self.tasks.iter().enumerate() {
            for s in split.train.samples().iter().chain(split.test.samples()) {
                if !self.label_spaces[t].contains(&s.label) {
                    return Err(Error::Contract(format!(
                        "task {t} contains sample with label {} outside its label space",
                        s.label
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Split one class's sample indices 80/20 into train/test, seeded.
fn split_class_indices(indices: &[usize], rng: &mut SeededRng) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = indices.to_vec();
    rng.shuffle(&mut shuffled);
    let train_count = (shuffled.len() * 4) / 5;
    let test = shuffled.split_off(train_count);
    (shuffled, test)
}

/// Mean and scale per feature dimension, fitted on the pretraining train set.
fn standardize(stream: &mut TaskStream) {
    let fit = &stream.pretrain.train;
    if fit.is_empty() {
        return;
    }
    let dim = fit.dim();
    let n = fit.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in fit.samples() {
        for (m, v) in mean.iter_mut().zip(&s.features) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for s in fit.samples() {
        for ((va, v), m) in var.iter_mut().zip(&s.features).zip(&mean) {
            *va += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();

    let mut apply = |ds: &mut Dataset| {
        for s in &mut ds.samples {
            for ((f, m), sc) in s.features.iter_mut().zip(&mean).zip(&scale) {
                *f = (*f - m) / sc;
            }
        }
    };
    apply(&mut stream.pretrain.train);
    apply(&mut stream.pretrain.test);
    for split in &mut stream.tasks {
        apply(&mut split.train);
        apply(&mut split.test);
    }
}

/// Generate a synthetic task stream of isotropic Gaussian class clusters.
///
/// Incremental classes get ids `0..n_classes`; an equally sized disjoint
/// pretraining class set gets ids `n_classes..2*n_classes`. Class means are
/// drawn uniformly on the unit sphere; each class contributes an 80/20
/// train/test split. Deterministic in `seed`.
pub fn make_synthetic_stream(
    seed: u64,
    n_classes: usize,
    classes_per_task: usize,
    d_in: usize,
    samples_per_class: usize,
    spread: f64,
) -> Result<TaskStream> {
    if classes_per_task == 0 || n_classes == 0 || !n_classes.is_multiple_of(classes_per_task) {
        return Err(Error::Config(format!(
            "n_classes {n_classes} not divisible by classes_per_task {classes_per_task}"
        )));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::Config(format!("spread must be > 0, got {spread}")));
    }
    if d_in == 0 {
        return Err(Error::Config("d_in must be >= 1".into()));
    }
    if samples_per_class < 2 {
        return Err(Error::Config(
            "samples_per_class must be >= 2 for a train/test split".into(),
        ));
    }

    let master = SeededRng::new(seed);
    let total_classes = 2 * n_classes;
    let mut means_rng = master.labeled("class-means");
    let means: Vec<Vec<f64>> = (0..total_classes)
        .map(|_| {
            let mut v = means_rng.normal_vec(d_in);
            let norm = crate::linalg::vec_norm(&v).max(f64::MIN_POSITIVE);
            for x in &mut v {
                *x /= norm;
            }
            v
        })
        .collect();

    let mut class_splits: Vec<Split> = Vec::with_capacity(total_classes);
    for (c, mean) in means.iter().enumerate() {
        let mut sample_rng = master.labeled(&format!("class-{c}-samples"));
        let mut ds = Dataset::new(d_in)?;
        for _ in 0..samples_per_class {
            let features: Vec<f64> = mean
                .iter()
                .map(|m| m + spread * sample_rng.normal())
                .collect();
            ds.push(Sample { features, label: c })?;
        }
        let mut split_rng = master.labeled(&format!("class-{c}-split"));
        let all: Vec<usize> = (0..ds.len()).collect();
        let (train_idx, test_idx) = split_class_indices(&all, &mut split_rng);
        let mut train = Dataset::new(d_in)?;
        let mut test = Dataset::new(d_in)?;
        for i in train_idx {
            train.push(ds.samples()[i].clone())?;
        }
        for i in test_idx {
            test.push(ds.samples()[i].clone())?;
        }
        class_splits.push(Split { train, test });
    }

    let merge = |ids: &[usize]| -> Result<Split> {
        let mut train = Dataset::new(d_in)?;
        let mut test = Dataset::new(d_in)?;
        for &c in ids {
            for s in class_splits[c].train.samples() {
                train.push(s.clone())?;
            }
            for s in class_splits[c].test.samples() {
                test.push(s.clone())?;
            }
        }
        Ok(Split { train, test })
    };

    let mut tasks = Vec::new();
    let mut label_spaces = Vec::new();
    for chunk in (0..n_classes).collect::<Vec<_>>().chunks(classes_per_task) {
        tasks.push(merge(chunk)?);
        label_spaces.push(chunk.iter().copied().collect());
    }
    let pretrain = merge(&(n_classes..total_classes).collect::<Vec<_>>())?;

    let mut stream = TaskStream {
        tasks,
        label_spaces,
        pretrain,
    };
    standardize(&mut stream);
    stream.validate()?;
    Ok(stream)
}

/// Split a loaded dataset into a task stream.
///
/// A `pretrain_fraction` of the classes (rounded to nearest) is reserved for
/// the pretraining split; the remaining class ids are shuffled by `seed` and
/// chunked into tasks of `classes_per_task`. Each class is split 80/20 into
/// train/test, seeded.
pub fn split_into_tasks(
    dataset: &Dataset,
    classes_per_task: usize,
    pretrain_fraction: f64,
    seed: u64,
) -> Result<TaskStream> {
    if classes_per_task == 0 {
        return Err(Error::Config("classes_per_task must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&pretrain_fraction) {
        return Err(Error::Config(format!(
            "pretrain_fraction must lie in [0,1), got {pretrain_fraction}"
        )));
    }
    let by_class = dataset.indices_by_class();
    let classes: Vec<usize> = by_class.keys().copied().collect();
    if classes.is_empty() {
        return Err(Error::Degenerate("dataset has no samples".into()));
    }
    let reserved = (classes.len() as f64 * pretrain_fraction).round() as usize;
    let remaining = classes.len() - reserved;
    if remaining == 0 || !remaining.is_multiple_of(classes_per_task) {
        return Err(Error::Config(format!(
            "{remaining} incremental classes not divisible by classes_per_task {classes_per_task}"
        )));
    }

    let master = SeededRng::new(seed);
    let mut assign_rng = master.labeled("class-assignment");
    let mut shuffled = classes;
    assign_rng.shuffle(&mut shuffled);
    let pretrain_classes: Vec<usize> = shuffled[..reserved].to_vec();
    let cl_classes: Vec<usize> = shuffled[reserved..].to_vec();

    let dim = dataset.dim();
    let split_class = |c: usize| -> Result<Split> {
        let mut rng = master.labeled(&format!("class-{c}-split"));
        let (train_idx, test_idx) = split_class_indices(&by_class[&c], &mut rng);
        let mut train = Dataset::new(dim)?;
        let mut test = Dataset::new(dim)?;
        for i in train_idx {
            train.push(dataset.samples()[i].clone())?;
        }
        for i in test_idx {
            test.push(dataset.samples()[i].clone())?;
        }
        Ok(Split { train, test })
    };

    let merge = |ids: &[usize]| -> Result<Split> {
        let mut train = Dataset::new(dim)?;
        let mut test = Dataset::new(dim)?;
        for &c in ids {
            let split = split_class(c)?;
            for s in split.train.samples() {
                train.push(s.clone())?;
            }
            for s in split.test.samples() {
                test.push(s.clone())?;
            }
        }
        Ok(Split { train, test })
    };

    let mut tasks = Vec::new();
    let mut label_spaces = Vec::new();
    for chunk in cl_classes.chunks(classes_per_task) {
        tasks.push(merge(chunk)?);
        label_spaces.push(chunk.iter().copied().collect());
    }
    let pretrain = merge(&pretrain_classes)?;

    let mut stream = TaskStream {
        tasks,
        label_spaces,
        pretrain,
    };
    standardize(&mut stream);
    stream.validate()?;
    Ok(stream)
}
