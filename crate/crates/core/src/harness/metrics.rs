//! Classification metrics in percent, derived from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Zero for an empty slice.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Rows whose true label is this class.
    pub support: u64,
    /// Set when precision + recall is zero and F1 was defined as 0.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Unweighted mean of the per-class F1 over all classes.
    pub macro_f1: f64,
    /// Support-weighted mean of the per-class F1.
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// `confusion[true][predicted]` counts; labels are 0-based class indices.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!("{} labels, {} predictions", y_true.len(), y_pred.len())));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Shape(format!("label pair ({t}, {p}) outside {n_classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Accuracy, macro/weighted F1 and per-class scores, all in percent.
pub fn compute_metrics(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<Metrics> {
    if y_true.is_empty() {
        return Err(Error::Shape("metrics of an empty prediction set".into()));
    }
    metrics_from_confusion(confusion_matrix(y_true, y_pred, n_classes)?)
}

pub fn metrics_from_confusion(confusion: Vec<Vec<u64>>) -> Result<Metrics> {
    let k = confusion.len();
    if k == 0 || confusion.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Shape("confusion matrix counts no rows".into()));
    }
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if support == 0 { 0.0 } else { tp / support as f64 };
            let degenerate = precision + recall == 0.0;
            let f1 = if degenerate { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics {
                class: c,
                precision: 100.0 * precision,
                recall: 100.0 * recall,
                f1: 100.0 * f1,
                support,
                degenerate,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64;
    let weighted_f1 = per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total as f64;
    Ok(Metrics { accuracy: 100.0 * correct as f64 / total as f64, macro_f1, weighted_f1, per_class, confusion })
}

/// Element-wise sum of equally sized confusion matrices.
pub fn pool_confusion<'a>(matrices: impl IntoIterator<Item = &'a Vec<Vec<u64>>>) -> Vec<Vec<u64>> {
    let mut out: Vec<Vec<u64>> = Vec::new();
    for m in matrices {
        if out.is_empty() {
            out = m.clone();
            continue;
        }
        for (ro, rm) in out.iter_mut().zip(m) {
            for (o, v) in ro.iter_mut().zip(rm) {
                *o += v;
            }
        }
    }
    out
}
