use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MlpModel, MlpSpec};
use crate::dataset::{BinnedDataset, FailureClass};
use crate::error::{Error, Result};
use crate::gbdt::softmax;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Reshuffle rows every epoch; otherwise batches follow row order.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, epochs: 50, batch_size: 32, seed: 0, shuffle: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Independent seed for sub-stream `stream` of `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batches of row indices for one epoch. A pure function of
/// `(n, cfg, epoch)`, so every party of a split network derives the same one.
pub fn batch_schedule(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        let stream = cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
    }
    order.chunks(cfg.batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Mean cross-entropy of `softmax(margins)` and its gradient with respect to
/// the margins, `(p − onehot)/n`.
pub fn softmax_cross_entropy(margins: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len().max(1) as f64;
    let mut grad = softmax(margins);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= grad[[i, y]].max(f64::MIN_POSITIVE).ln();
        grad[[i, y]] -= 1.0;
    }
    grad /= n;
    (loss / n, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

pub(crate) fn check_targets(labels: &[usize], n_rows: usize, n_classes: usize) -> Result<()> {
    if labels.len() != n_rows {
        return Err(Error::Shape(format!("{n_rows} rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Training(format!("label {bad} outside the {n_classes} network outputs")));
    }
    Ok(())
}

/// Mini-batch SGD on softmax cross-entropy. The network's output width is the
/// number of classes.
pub fn train(x: ArrayView2<f64>, labels: &[usize], spec: &MlpSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_model(MlpModel::init(spec)?, x, labels, cfg)
}

/// As [`train`], starting from given parameters.
pub fn train_model(
    mut model: MlpModel,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_targets(labels, x.nrows(), model.output_width())?;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (b, rows) in batch_schedule(x.nrows(), cfg, epoch).iter().enumerate() {
            let xb = x.select(Axis(0), rows);
            let yb: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let acts = model.forward(xb.view())?;
            let (loss, upstream) = softmax_cross_entropy(acts.output().view(), &yb);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            let (grads, _) = model.backward(&acts, upstream.view())?;
            model.sgd_step(&grads, cfg.learning_rate);
            if !model.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            total += loss * rows.len() as f64;
        }
        epoch_loss.push(total / x.nrows().max(1) as f64);
    }
    Ok(TrainOutcome { model, epoch_loss })
}

/// Centralized classifier on binned levels fed as reals.
pub fn train_centralized(d: &BinnedDataset, spec: &MlpSpec, cfg: &TrainConfig) -> Result<MlpModel> {
    if spec.output_width() != FailureClass::COUNT {
        return Err(Error::Config(format!(
            "classifier needs {} outputs, spec has {}",
            FailureClass::COUNT,
            spec.output_width()
        )));
    }
    Ok(train(d.to_f64().view(), &d.class_indices(), spec, cfg)?.model)
}

pub fn predict_proba(model: &MlpModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(softmax(model.outputs(x)?.view()))
}

pub fn predict(model: &MlpModel, x: ArrayView2<f64>) -> Result<Vec<usize>> {
    Ok(crate::gbdt::argmax_rows(model.outputs(x)?.view()))
}
