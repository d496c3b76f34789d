//! Accuracy matrix and the continual-learning summary metrics derived from it.

use serde::{Deserialize, Serialize};

use crate::config::Algo;
use crate::error::{Error, Result};
use crate::nn::{Batch, MlpModel};

/// `r[i][j]`: accuracy on task `j`'s test set right after finishing task `i`
/// (`j <= i`). Row `i` has `i + 1` entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::Shape(format!(
                "row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.rows.is_empty() {
            Err(Error::Data("accuracy matrix is empty".into()))
        } else {
            Ok(())
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Top-1 accuracy on each test set, argmax over the full class head.
pub fn eval_global(model: &MlpModel, tests: &[&Batch]) -> Result<Vec<f64>> {
    if tests.is_empty() {
        return Err(Error::Data("no test sets given".into()));
    }
    tests
        .iter()
        .map(|b| {
            if b.is_empty() {
                return Err(Error::Data("empty test set".into()));
            }
            let pred = model.predict(b.inputs())?;
            let hits = pred.iter().zip(b.labels()).filter(|(p, y)| p == y).count();
            Ok(hits as f64 / b.len() as f64)
        })
        .collect()
}

/// Accuracy over the union of the test sets, weighted by sample count.
pub fn pooled_accuracy(model: &MlpModel, tests: &[&Batch]) -> Result<f64> {
    let accs = eval_global(model, tests)?;
    let total: usize = tests.iter().map(|b| b.len()).sum();
    let hits: f64 = accs.iter().zip(tests).map(|(a, b)| a * b.len() as f64).sum();
    Ok(hits / total as f64)
}

/// Mean of the last row.
pub fn final_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    m.require_nonempty()?;
    Ok(mean(m.rows.last().expect("nonempty")))
}

/// Mean over boundaries of the mean accuracy on the tasks seen so far.
pub fn average_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    m.require_nonempty()?;
    let prefix_means: Vec<f64> = m.rows.iter().map(|r| mean(r)).collect();
    Ok(mean(&prefix_means))
}

/// Mean over all but the last task of (best accuracy ever reached on the
/// task) minus (its accuracy at the end).
pub fn forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let n = m.n_tasks();
    if n < 2 {
        return Err(Error::Data(format!("forgetting needs at least 2 tasks, got {n}")));
    }
    let last = &m.rows[n - 1];
    let drops: Vec<f64> = (0..n - 1)
        .map(|j| {
            let best = (j..n).map(|i| m.rows[i][j]).fold(f64::NEG_INFINITY, f64::max);
            best - last[j]
        })
        .collect();
    Ok(mean(&drops))
}

/// Incrementally tracks the average accuracy as rows arrive.
#[derive(Debug, Clone, Default)]
pub struct RunningAverage {
    prefix_means: Vec<f64>,
}

impl RunningAverage {
    pub fn push(&mut self, row: &[f64]) -> f64 {
        self.prefix_means.push(mean(row));
        self.value()
    }

    pub fn value(&self) -> f64 {
        mean(&self.prefix_means)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub algo: Algo,
    pub alpha_dir: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub final_acc: f64,
    pub avg_acc: f64,
    /// Zero for single-task streams.
    pub forgetting: f64,
    /// Rounds (1-based) needed to reach each task's best pooled accuracy;
    /// present only with per-round evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounds_to_best: Option<Vec<usize>>,
    pub config_digest: String,
    pub wall_ms: u64,
}

impl MetricsRecord {
    /// Copy with run-time-dependent fields cleared, for determinism hashing.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0,
            ..self.clone()
        }
    }
}
