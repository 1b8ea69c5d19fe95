use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { weight: f64 },
}

/// A regression tree stored as a node arena; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Leaf weight reached by a row, given a lookup of feature values.
    pub fn leaf_weight(&self, value: impl Fn(usize) -> u8) -> f64 {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                TreeNode::Leaf { weight } => return *weight,
                TreeNode::Split { feature, threshold, left, right } => {
                    id = if f64::from(value(*feature)) <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], id: usize) -> usize {
            match &nodes[id] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }
}

pub fn leaf_weight(g_sum: f64, h_sum: f64, lambda: f64) -> f64 {
    -g_sum / (h_sum + lambda)
}

/// A node still eligible for splitting. `samples` is ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenNode {
    pub id: usize,
    pub samples: Vec<usize>,
    pub g_sum: f64,
    pub h_sum: f64,
}

/// Split decided for one frontier node: the chosen feature and threshold plus
/// the side of every node sample, in the node's sample order.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSplit {
    pub feature: usize,
    pub threshold: f64,
    pub go_left: Vec<bool>,
}

/// Level-order tree construction shared by centralized and federated
/// training. The caller supplies one decision per frontier node per level;
/// the grower owns node numbering, sample routing and leaf weights.
#[derive(Clone, Debug)]
pub struct TreeGrower {
    nodes: Vec<Option<TreeNode>>,
    frontier: Vec<OpenNode>,
    depth: usize,
    max_depth: usize,
    min_split: usize,
    lambda: f64,
    /// Leaf node id per sample (for samples that reached a leaf).
    assignment: Vec<Option<usize>>,
}

impl TreeGrower {
    pub fn new(
        n_samples: usize,
        samples: Vec<usize>,
        g: &[f64],
        h: &[f64],
        max_depth: usize,
        min_child: usize,
        lambda: f64,
    ) -> Self {
        let mut grower = Self {
            nodes: Vec::new(),
            frontier: Vec::new(),
            depth: 0,
            max_depth,
            min_split: 2 * min_child.max(1),
            lambda,
            assignment: vec![None; n_samples],
        };
        grower.open(samples, g, h);
        grower
    }

    fn open(&mut self, samples: Vec<usize>, g: &[f64], h: &[f64]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(None);
        let g_sum = samples.iter().map(|&i| g[i]).sum();
        let h_sum = samples.iter().map(|&i| h[i]).sum();
        let node = OpenNode { id, samples, g_sum, h_sum };
        if self.depth >= self.max_depth || node.samples.len() < self.min_split {
            self.close(node);
        } else {
            self.frontier.push(node);
        }
        id
    }

    fn close(&mut self, node: OpenNode) {
        for &i in &node.samples {
            self.assignment[i] = Some(node.id);
        }
        self.nodes[node.id] = Some(TreeNode::Leaf { weight: leaf_weight(node.g_sum, node.h_sum, self.lambda) });
    }

    /// Nodes to split at the current level, in creation order.
    pub fn frontier(&self) -> &[OpenNode] {
        &self.frontier
    }

    pub fn is_done(&self) -> bool {
        self.frontier.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Applies one decision per frontier node and advances one level.
    pub fn apply_level(&mut self, decisions: Vec<Option<LevelSplit>>, g: &[f64], h: &[f64]) {
        assert_eq!(decisions.len(), self.frontier.len(), "one decision per frontier node");
        let frontier = std::mem::take(&mut self.frontier);
        self.depth += 1;
        for (node, decision) in frontier.into_iter().zip(decisions) {
            match decision {
                None => self.close(node),
                Some(split) => {
                    assert_eq!(split.go_left.len(), node.samples.len());
                    let (left, right): (Vec<(usize, bool)>, Vec<(usize, bool)>) =
                        node.samples.iter().copied().zip(split.go_left).partition(|&(_, l)| l);
                    let left_id = self.open(left.into_iter().map(|(i, _)| i).collect(), g, h);
                    let right_id = self.open(right.into_iter().map(|(i, _)| i).collect(), g, h);
                    self.nodes[node.id] = Some(TreeNode::Split {
                        feature: split.feature,
                        threshold: split.threshold,
                        left: left_id,
                        right: right_id,
                    });
                }
            }
        }
    }

    /// Closes any remaining frontier and returns the tree and each sample's
    /// leaf weight (0 for samples outside the root).
    pub fn finish(mut self) -> (Tree, Vec<f64>) {
        for node in std::mem::take(&mut self.frontier) {
            self.close(node);
        }
        let nodes: Vec<TreeNode> = self.nodes.into_iter().map(|n| n.expect("every node resolved")).collect();
        let weights = self
            .assignment
            .iter()
            .map(|a| match a.map(|id| &nodes[id]) {
                Some(TreeNode::Leaf { weight }) => *weight,
                _ => 0.0,
            })
            .collect();
        (Tree { nodes }, weights)
    }
}
