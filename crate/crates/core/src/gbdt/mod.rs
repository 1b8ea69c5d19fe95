//! Histogram-based gradient-boosted trees for multiclass classification.
//!
//! Each boosting round fits one regression tree per class to the softmax
//! cross-entropy gradients, grown level by level with second-order gain and
//! leaf weights `−G / (H + λ)`. Gradients are rounded to a `2^-40` grid so
//! histogram sums are exact. There is no row or column subsampling, so a fit
//! is a pure function of data and parameters.

mod hist;
mod objective;
mod tree;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::{BinnedDataset, FailureClass};
use crate::error::{Error, Result};

pub use hist::{
    best_split, bin_of, compute_hist, propose_split_candidates, split_gain, BinStats, FeatureBlock, FeatureHistogram,
    Histogram, SplitCandidates, SplitChoice, SplitParams,
};
pub use objective::{
    log_loss, quantize_gradients, softmax, softmax_row, update_gradients, GradientPairs, GRADIENT_SCALE_BITS,
};
pub use tree::{leaf_weight, LevelSplit, OpenNode, Tree, TreeGrower, TreeNode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self { n_trees: 20, max_depth: 5, learning_rate: 0.3, lambda: 1.0, gamma: 0.0, min_child: 1 }
    }
}

impl GbdtParams {
    pub fn split_params(&self) -> SplitParams {
        SplitParams { lambda: self.lambda, gamma: self.gamma, min_child: self.min_child }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("invalid boosting parameters {self:?}")));
        }
        Ok(())
    }
}

/// Boosted ensemble: `trees[round][class]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub params: GbdtParams,
    pub n_classes: usize,
    pub n_features: usize,
    pub base_score: Vec<f64>,
    pub trees: Vec<Vec<Tree>>,
}

/// Log class priors of the training labels. Absent classes are floored at
/// a prior of 1e-6 to keep the margin finite.
pub fn base_scores(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let n = labels.len().max(1) as f64;
    counts.iter().map(|&c| (c as f64 / n).max(1e-6).ln()).collect()
}

pub(crate) fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::Training(format!("label {bad} outside 0..{n_classes}")));
    }
    let first = labels.first().copied();
    if labels.iter().all(|&y| Some(y) == first) {
        return Err(Error::Training("need at least two classes in the training labels".into()));
    }
    Ok(())
}

/// Adds a round's per-sample leaf weights to the running margins.
pub fn accumulate_round(scores: &mut Array2<f64>, weights: &[Vec<f64>], learning_rate: f64) {
    for (k, w) in weights.iter().enumerate() {
        for (i, &wi) in w.iter().enumerate() {
            scores[[i, k]] += learning_rate * wi;
        }
    }
}

/// Margins before any tree: the base score on every row.
pub fn initial_scores(n: usize, base: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((n, base.len()), |(_, k)| base[k])
}

pub fn fit(cells: ArrayView2<u8>, labels: &[usize], n_classes: usize, params: &GbdtParams) -> Result<GbdtModel> {
    params.validate()?;
    if cells.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} rows, {} labels", cells.nrows(), labels.len())));
    }
    check_labels(labels, n_classes)?;
    let (n, m) = cells.dim();
    let candidates = propose_split_candidates(cells);
    let block = FeatureBlock::new(cells, (0..m).collect(), &candidates);
    let split_params = params.split_params();
    let base = base_scores(labels, n_classes);
    let mut scores = initial_scores(n, &base);
    let all: Vec<usize> = (0..n).collect();
    let mut trees = Vec::with_capacity(params.n_trees);

    for _ in 0..params.n_trees {
        let gp = quantize_gradients(update_gradients(labels, scores.view()));
        let mut round = Vec::with_capacity(n_classes);
        let mut weights = Vec::with_capacity(n_classes);
        for k in 0..n_classes {
            let g = gp.g.column(k).to_vec();
            let h = gp.h.column(k).to_vec();
            let mut grower = TreeGrower::new(n, all.clone(), &g, &h, params.max_depth, params.min_child, params.lambda);
            while !grower.is_done() {
                let decisions = grower
                    .frontier()
                    .iter()
                    .map(|node| {
                        let hist = compute_hist(&block, &g, &h, &node.samples);
                        best_split(&hist, &split_params).map(|c| LevelSplit {
                            feature: c.feature,
                            threshold: c.threshold,
                            go_left: block.go_left(c.feature, c.bin, &node.samples),
                        })
                    })
                    .collect();
                grower.apply_level(decisions, &g, &h);
            }
            let (tree, w) = grower.finish();
            round.push(tree);
            weights.push(w);
        }
        accumulate_round(&mut scores, &weights, params.learning_rate);
        trees.push(round);
    }
    Ok(GbdtModel { params: *params, n_classes, n_features: m, base_score: base, trees })
}

pub fn fit_binned(d: &BinnedDataset, params: &GbdtParams) -> Result<GbdtModel> {
    fit(d.cells().view(), &d.class_indices(), FailureClass::COUNT, params)
}

impl GbdtModel {
    /// Raw margins `base + η·Σ leaf weights`, accumulated round by round.
    pub fn predict_margins(&self, cells: ArrayView2<u8>) -> Array2<f64> {
        let mut scores = initial_scores(cells.nrows(), &self.base_score);
        for round in &self.trees {
            for (k, tree) in round.iter().enumerate() {
                for (i, row) in cells.rows().into_iter().enumerate() {
                    scores[[i, k]] += self.params.learning_rate * tree.leaf_weight(|f| row[f]);
                }
            }
        }
        scores
    }

    pub fn predict_proba(&self, cells: ArrayView2<u8>) -> Array2<f64> {
        softmax(self.predict_margins(cells).view())
    }

    pub fn predict(&self, cells: ArrayView2<u8>) -> Vec<usize> {
        argmax_rows(self.predict_margins(cells).view())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Index of each row's maximum; ties go to the lowest index.
pub fn argmax_rows(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
