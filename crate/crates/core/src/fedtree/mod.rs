//! Vertical federated gradient boosting.
//!
//! The active party holds the labels (and, in Paillier mode, the private
//! key). Passive parties hold disjoint feature columns over the same rows.
//! Every round the active party ships per-sample gradients, each party
//! builds per-node histograms over its own columns, the active party picks
//! splits on the union and the owning party answers which samples go left.
//! Plaintext training reproduces centralized [`crate::gbdt::fit`] exactly.

mod protocol;

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::FeaturePartition;
use crate::error::{Error, Result};
use crate::federation::ExecMode;
use crate::gbdt::{argmax_rows, initial_scores, softmax, GbdtModel, GbdtParams, Tree, TreeNode};
use crate::paillier::{SUPPORTED_KEY_BITS, TEST_KEY_BITS};

pub use protocol::{train_fedtree, FedTreeOutcome};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FedTreeMode {
    #[default]
    Plaintext,
    /// Gradients and passive-party histograms travel as Paillier ciphertexts.
    Paillier,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedTreeConfig {
    pub params: GbdtParams,
    pub mode: FedTreeMode,
    pub key_bits: usize,
    /// Index of the label-holding party.
    pub active_party: usize,
    pub exec: ExecMode,
    /// Seeds key generation and encryption randomness.
    pub seed: u64,
}

impl Default for FedTreeConfig {
    fn default() -> Self {
        Self {
            params: GbdtParams::default(),
            mode: FedTreeMode::Plaintext,
            key_bits: TEST_KEY_BITS,
            active_party: 0,
            exec: ExecMode::Lockstep,
            seed: 0,
        }
    }
}

impl FedTreeConfig {
    pub fn validate(&self, n_parties: usize) -> Result<()> {
        self.params.validate()?;
        if self.active_party >= n_parties {
            return Err(Error::Config(format!(
                "active party {} out of range for {n_parties} parties",
                self.active_party
            )));
        }
        if self.mode == FedTreeMode::Paillier && !SUPPORTED_KEY_BITS.contains(&self.key_bits) {
            return Err(Error::Config(format!("unsupported key length {} bits", self.key_bits)));
        }
        Ok(())
    }
}

/// One party's feature columns, with the global id of every column.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyColumns {
    pub cells: Array2<u8>,
    pub feature_ids: Vec<usize>,
}

impl PartyColumns {
    pub fn new(cells: Array2<u8>, feature_ids: Vec<usize>) -> Result<Self> {
        if cells.ncols() != feature_ids.len() {
            return Err(Error::Shape(format!("{} columns, {} feature ids", cells.ncols(), feature_ids.len())));
        }
        Ok(Self { cells, feature_ids })
    }
}

/// Columns of `cells` owned by each party; global ids are column indices.
pub fn split_columns(cells: ArrayView2<u8>, partition: &FeaturePartition) -> Result<Vec<PartyColumns>> {
    if partition.assignment.len() != cells.ncols() {
        return Err(Error::Shape(format!(
            "partition covers {} features, data has {}",
            partition.assignment.len(),
            cells.ncols()
        )));
    }
    (0..partition.n_parties())
        .map(|p| {
            let ids = partition.party_features(p);
            PartyColumns::new(cells.select(ndarray::Axis(1), &ids), ids)
        })
        .collect()
}

/// A tree whose splits name the owning party and its local column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FedNode {
    Split { party: usize, slot: usize, threshold: f64, left: usize, right: usize },
    Leaf { weight: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedTree {
    pub nodes: Vec<FedNode>,
}

impl FedTree {
    /// Leaf weight reached by row `row`; each comparison reads the owner's column.
    pub fn leaf_weight(&self, slices: &[ArrayView2<u8>], row: usize) -> f64 {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                FedNode::Leaf { weight } => return *weight,
                FedNode::Split { party, slot, threshold, left, right } => {
                    id = if f64::from(slices[*party][[row, *slot]]) <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

/// Ensemble trained across parties: `trees[round][class]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederatedModel {
    pub params: GbdtParams,
    pub n_classes: usize,
    pub base_score: Vec<f64>,
    /// Global feature id of every party's columns.
    pub party_features: Vec<Vec<usize>>,
    pub trees: Vec<Vec<FedTree>>,
}

impl FederatedModel {
    pub(crate) fn from_global(
        params: GbdtParams,
        n_classes: usize,
        base_score: Vec<f64>,
        party_features: Vec<Vec<usize>>,
        trees: Vec<Vec<Tree>>,
    ) -> Result<Self> {
        let owner: HashMap<usize, (usize, usize)> = party_features
            .iter()
            .enumerate()
            .flat_map(|(p, ids)| ids.iter().enumerate().map(move |(s, &f)| (f, (p, s))))
            .collect();
        let convert = |t: Tree| -> Result<FedTree> {
            let nodes = t
                .nodes
                .into_iter()
                .map(|n| match n {
                    TreeNode::Leaf { weight } => Ok(FedNode::Leaf { weight }),
                    TreeNode::Split { feature, threshold, left, right } => {
                        let &(party, slot) = owner
                            .get(&feature)
                            .ok_or_else(|| Error::Training(format!("split on unowned feature {feature}")))?;
                        Ok(FedNode::Split { party, slot, threshold, left, right })
                    }
                })
                .collect::<Result<_>>()?;
            Ok(FedTree { nodes })
        };
        let trees = trees
            .into_iter()
            .map(|round| round.into_iter().map(convert).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?;
        Ok(Self { params, n_classes, base_score, party_features, trees })
    }

    pub fn n_parties(&self) -> usize {
        self.party_features.len()
    }

    /// The same ensemble over column-concatenated data, splits naming global ids.
    pub fn to_centralized(&self) -> GbdtModel {
        let trees = self
            .trees
            .iter()
            .map(|round| {
                round
                    .iter()
                    .map(|t| Tree {
                        nodes: t
                            .nodes
                            .iter()
                            .map(|n| match *n {
                                FedNode::Leaf { weight } => TreeNode::Leaf { weight },
                                FedNode::Split { party, slot, threshold, left, right } => TreeNode::Split {
                                    feature: self.party_features[party][slot],
                                    threshold,
                                    left,
                                    right,
                                },
                            })
                            .collect(),
                    })
                    .collect()
            })
            .collect();
        let n_features = self.party_features.iter().flatten().map(|&f| f + 1).max().unwrap_or(0);
        GbdtModel {
            params: self.params,
            n_classes: self.n_classes,
            n_features,
            base_score: self.base_score.clone(),
            trees,
        }
    }

    /// Margins accumulated in the same order as [`GbdtModel::predict_margins`].
    pub fn predict_margins(&self, slices: &[ArrayView2<u8>]) -> Result<Array2<f64>> {
        if slices.len() != self.n_parties() {
            return Err(Error::Shape(format!("{} slices for {} parties", slices.len(), self.n_parties())));
        }
        let n = slices.first().map_or(0, |s| s.nrows());
        for (p, (s, ids)) in slices.iter().zip(&self.party_features).enumerate() {
            if s.nrows() != n || s.ncols() != ids.len() {
                return Err(Error::Shape(format!("party {p} slice is {:?}, expected ({n}, {})", s.dim(), ids.len())));
            }
        }
        let mut scores = initial_scores(n, &self.base_score);
        for round in &self.trees {
            for (k, tree) in round.iter().enumerate() {
                for i in 0..n {
                    scores[[i, k]] += self.params.learning_rate * tree.leaf_weight(slices, i);
                }
            }
        }
        Ok(scores)
    }

    pub fn predict_proba(&self, slices: &[ArrayView2<u8>]) -> Result<Array2<f64>> {
        Ok(softmax(self.predict_margins(slices)?.view()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Class predictions, each tree comparison answered from its owner's slice.
pub fn predict_federated(model: &FederatedModel, slices: &[ArrayView2<u8>]) -> Result<Vec<usize>> {
    Ok(argmax_rows(model.predict_margins(slices)?.view()))
}

#[cfg(test)]
mod tests;
