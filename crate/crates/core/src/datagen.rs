//! Synthetic task streams and Dirichlet client partitions.
//!
//! Classes are isotropic Gaussian clusters whose means sit on a sphere of
//! radius `3 * cluster_spread`. A class-incremental stream slices the label
//! space into contiguous blocks, one per task; a domain-incremental stream
//! keeps every class in every task and moves the clusters by a per-task
//! rotation of the first two feature axes plus a constant offset.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, purpose, ...)`
//! so that the same class in the same task is generated identically no matter
//! which kind of stream asked for it.

use std::collections::BTreeSet;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Matrix};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Radians added per task to the rotation of axes (0, 1).
    #[serde(default)]
    pub rotation_angle_per_task: f64,
    /// Constant added to every feature, per task.
    #[serde(default)]
    pub bias_shift_per_task: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    pub total_classes: usize,
    pub n_tasks: usize,
    pub samples_per_class_train: usize,
    pub samples_per_class_test: usize,
    pub cluster_spread: f64,
    #[serde(default)]
    pub domain_shift: DomainShift,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("total_classes", self.total_classes),
            ("n_tasks", self.n_tasks),
            ("samples_per_class_train", self.samples_per_class_train),
            ("samples_per_class_test", self.samples_per_class_test),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::config(
                "cluster_spread",
                format!("must be a positive finite number, got {}", self.cluster_spread),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ClassIl,
    DomainIl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: usize,
    pub train: Batch,
    pub test: Batch,
    pub classes_present: BTreeSet<usize>,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub kind: TaskKind,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Data("stream has no tasks".into()));
        }
        for t in &self.tasks {
            for (name, b) in [("train", &t.train), ("test", &t.test)] {
                if b.is_empty() {
                    return Err(Error::Data(format!("task {} has an empty {name} set", t.task_id)));
                }
                if b.inputs().cols() != self.feature_dim {
                    return Err(Error::Shape(format!(
                        "task {} {name} width {} != feature_dim {}",
                        t.task_id,
                        b.inputs().cols(),
                        self.feature_dim
                    )));
                }
                b.check_labels(self.n_classes)?;
            }
        }
        Ok(())
    }
}

// stream purposes for derive_seed
const MEANS: u64 = 1;
const SAMPLES: u64 = 2;

/// Class means on a sphere of radius `3 * cluster_spread`.
pub fn class_means(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[MEANS]));
    let radius = 3.0 * spec.cluster_spread;
    (0..spec.total_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| radius * x / n).collect();
            }
        })
        .collect()
}

/// Maps a base-cluster point into task `t`'s domain.
fn shift_point(x: &mut [f64], t: usize, shift: &DomainShift) {
    let theta = t as f64 * shift.rotation_angle_per_task;
    if theta != 0.0 && x.len() >= 2 {
        let (s, c) = theta.sin_cos();
        let (a, b) = (x[0], x[1]);
        x[0] = c * a - s * b;
        x[1] = s * a + c * b;
    }
    let bias = t as f64 * shift.bias_shift_per_task;
    if bias != 0.0 {
        x.iter_mut().for_each(|v| *v += bias);
    }
}

/// Mean of class `c` as seen in task `t` of a domain-incremental stream.
pub fn shifted_mean(mean: &[f64], t: usize, shift: &DomainShift) -> Vec<f64> {
    let mut m = mean.to_vec();
    shift_point(&mut m, t, shift);
    m
}

#[allow(clippy::too_many_arguments)]
fn draw_split(
    spec: &SyntheticSpec,
    seed: u64,
    means: &[Vec<f64>],
    task: usize,
    classes: &[usize],
    split: u64,
    per_class: usize,
    shift: Option<&DomainShift>,
) -> Batch {
    let d = spec.feature_dim;
    let mut data = Vec::with_capacity(classes.len() * per_class * d);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            seed,
            &[SAMPLES, task as u64, c as u64, split],
        ));
        for _ in 0..per_class {
            let mut x: Vec<f64> = means[c]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + spec.cluster_spread * z
                })
                .collect();
            if let Some(s) = shift {
                shift_point(&mut x, task, s);
            }
            data.extend_from_slice(&x);
            labels.push(c);
        }
    }
    let inputs = Matrix::new(labels.len(), d, data).expect("sized above");
    Batch::new(inputs, labels).expect("sized above")
}

const TRAIN: u64 = 0;
const TEST: u64 = 1;

pub fn gen_class_il_stream(spec: &SyntheticSpec, seed: u64) -> Result<TaskStream> {
    spec.validate()?;
    if !spec.total_classes.is_multiple_of(spec.n_tasks) {
        return Err(Error::config(
            "total_classes",
            format!(
                "{} classes cannot be split evenly into {} tasks",
                spec.total_classes, spec.n_tasks
            ),
        ));
    }
    let per_task = spec.total_classes / spec.n_tasks;
    let means = class_means(spec, seed);
    let tasks = (0..spec.n_tasks)
        .map(|t| {
            let classes: Vec<usize> = (t * per_task..(t + 1) * per_task).collect();
            Task {
                task_id: t,
                train: draw_split(spec, seed, &means, t, &classes, TRAIN, spec.samples_per_class_train, None),
                test: draw_split(spec, seed, &means, t, &classes, TEST, spec.samples_per_class_test, None),
                classes_present: classes.into_iter().collect(),
                kind: TaskKind::ClassIl,
            }
        })
        .collect();
    Ok(TaskStream {
        kind: TaskKind::ClassIl,
        n_classes: spec.total_classes,
        feature_dim: spec.feature_dim,
        tasks,
    })
}

pub fn gen_domain_il_stream(spec: &SyntheticSpec, seed: u64) -> Result<TaskStream> {
    spec.validate()?;
    if spec.feature_dim < 2 {
        return Err(Error::config(
            "feature_dim",
            "domain-incremental streams rotate two axes and need feature_dim >= 2",
        ));
    }
    let means = class_means(spec, seed);
    let classes: Vec<usize> = (0..spec.total_classes).collect();
    let shift = spec.domain_shift;
    let tasks = (0..spec.n_tasks)
        .map(|t| Task {
            task_id: t,
            train: draw_split(spec, seed, &means, t, &classes, TRAIN, spec.samples_per_class_train, Some(&shift)),
            test: draw_split(spec, seed, &means, t, &classes, TEST, spec.samples_per_class_test, Some(&shift)),
            classes_present: classes.iter().copied().collect(),
            kind: TaskKind::DomainIl,
        })
        .collect();
    Ok(TaskStream {
        kind: TaskKind::DomainIl,
        n_classes: spec.total_classes,
        feature_dim: spec.feature_dim,
        tasks,
    })
}

/// Per-client index lists into one task's training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Checks that the assignments form a set partition of `0..n_samples`
    /// with no empty client.
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        let mut seen = vec![false; n_samples];
        for (k, idx) in self.assignments.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Data(format!("client {k} received no samples")));
            }
            for &i in idx {
                if i >= n_samples {
                    return Err(Error::Data(format!("client {k}: index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Data(format!("index {i} assigned twice")));
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(Error::Data(format!("index {i} not assigned"))),
            None => Ok(()),
        }
    }
}

pub const DEFAULT_PARTITION_RETRIES: usize = 1000;

pub fn dirichlet_partition(
    task: &Task,
    n_clients: usize,
    alpha_dir: f64,
    seed: u64,
) -> Result<Partition> {
    dirichlet_partition_with_retries(task, n_clients, alpha_dir, seed, DEFAULT_PARTITION_RETRIES)
}

/// Samples `p_c ~ Dir(alpha_dir * 1_K)` for every class and sends each of
/// that class's samples to a client drawn from `p_c`. The whole draw is
/// repeated while any client ends up empty.
pub fn dirichlet_partition_with_retries(
    task: &Task,
    n_clients: usize,
    alpha_dir: f64,
    seed: u64,
    max_draws: usize,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::config("n_clients", "must be >= 1"));
    }
    if !(alpha_dir > 0.0 && alpha_dir.is_finite()) {
        return Err(Error::config(
            "alpha_dir",
            format!("must be a positive finite number, got {alpha_dir}"),
        ));
    }
    let labels = task.train.labels();
    if labels.is_empty() {
        return Err(Error::Data(format!("task {} has no training samples", task.task_id)));
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let by_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    if n_clients == 1 {
        return Ok(Partition {
            assignments: vec![(0..labels.len()).collect()],
        });
    }

    let gamma = Gamma::new(alpha_dir, 1.0)
        .map_err(|e| Error::config("alpha_dir", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..max_draws.max(1) {
        let mut assignments = vec![Vec::new(); n_clients];
        for members in &by_class {
            let p = loop {
                let g: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
                if g.iter().sum::<f64>() > 0.0 {
                    break g;
                }
            };
            let pick = WeightedIndex::new(&p).expect("positive total weight");
            for &i in members {
                assignments[pick.sample(&mut rng)].push(i);
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            let part = Partition { assignments };
            debug_assert!(part.validate(labels.len()).is_ok());
            return Ok(part);
        }
    }
    Err(Error::Partition {
        alpha_dir,
        n_clients,
        retries: max_draws,
        class_counts: by_class.iter().map(Vec::len).collect(),
    })
}

/// Reads a `f0,...,f{d-1},label` CSV into a batch, checking the header, row
/// width and label range.
pub fn load_csv_batch(path: impl AsRef<Path>, feature_dim: usize, n_classes: usize) -> Result<Batch> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let expected: Vec<String> = (0..feature_dim)
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Data(format!(
            "{}: header must be {}, got {}",
            path.display(),
            expected.join(","),
            got.join(",")
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        if rec.len() != feature_dim + 1 {
            return Err(Error::Data(format!(
                "{} row {row}: expected {} fields, got {}",
                path.display(),
                feature_dim + 1,
                rec.len()
            )));
        }
        for (i, field) in rec.iter().take(feature_dim).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!("{} row {row}: f{i} = {field:?} is not a number", path.display()))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("{} row {row}: f{i} is not finite", path.display())));
            }
            data.push(v);
        }
        let label_field = rec[feature_dim].trim();
        let y: usize = label_field.parse().map_err(|_| {
            Error::Data(format!("{} row {row}: label {label_field:?} is not a class index", path.display()))
        })?;
        if y >= n_classes {
            return Err(Error::Data(format!(
                "{} row {row}: label {y} outside [0, {n_classes})",
                path.display()
            )));
        }
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    Batch::new(Matrix::new(labels.len(), feature_dim, data)?, labels)
}
