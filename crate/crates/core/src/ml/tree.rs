//! CART regression trees with variance-reduction splits.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    /// Reduction in squared error achieved by this split.
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub split: Option<Split>,
    /// Mean target of the training samples reaching the node.
    pub value: f64,
    /// Number of training samples (with bootstrap multiplicity) reaching the node.
    pub cover: f64,
}

/// A regression tree stored as a flat node array, root at index 0.
/// Samples with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NestedNode", try_from = "NestedNode")]
pub struct Tree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Features considered per split; `None` means all.
    pub max_features: Option<usize>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Self {
            nodes: vec![Node {
                split: None,
                value,
                cover,
            }],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        while let Some(s) = self.nodes[i].split {
            i = if x[s.feature] <= s.threshold { s.left } else { s.right };
        }
        self.nodes[i].value
    }

    /// Cover-weighted mean of the leaf values.
    pub fn expected_value(&self) -> f64 {
        let root = self.nodes[0].cover;
        self.nodes
            .iter()
            .filter(|n| n.split.is_none())
            .map(|n| n.value * n.cover / root)
            .sum()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i].split {
                None => 0,
                Some(s) => 1 + go(t, s.left).max(go(t, s.right)),
            }
        }
        go(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.split.is_none()).count()
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.nodes.iter().filter_map(|n| n.split.map(|s| s.feature)).max()
    }
}

/// Grows a tree on the rows listed in `samples` (repeats allowed).
pub fn build_tree<R: Rng>(
    x: &[Vec<f64>],
    y: &[f64],
    samples: &[usize],
    params: &TreeParams,
    rng: &mut R,
) -> Result<Tree> {
    if samples.is_empty() {
        return Err(MaError::InvalidInput("tree needs at least one sample".into()));
    }
    let p = x[samples[0]].len();
    let mut builder = Builder {
        x,
        y,
        params,
        n_features: p,
        nodes: Vec::new(),
    };
    let mut idx = samples.to_vec();
    builder.grow(&mut idx, 0, rng);
    Ok(Tree { nodes: builder.nodes })
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a TreeParams,
    n_features: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn grow<R: Rng>(&mut self, idx: &mut [usize], depth: usize, rng: &mut R) -> usize {
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / n;
        let sse: f64 = idx.iter().map(|&i| (self.y[i] - mean).powi(2)).sum();
        let sum_sq: f64 = idx.iter().map(|&i| self.y[i] * self.y[i]).sum();
        let id = self.nodes.len();
        self.nodes.push(Node {
            split: None,
            value: mean,
            cover: n,
        });

        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        let min_leaf = self.params.min_samples_leaf.max(1);
        // Targets equal up to rounding count as constant.
        if !depth_ok || idx.len() < 2 * min_leaf || sse <= 1e-20 * sum_sq {
            return id;
        }
        let Some((feature, threshold, gain)) = self.best_split(idx, mean, sse, min_leaf, rng) else {
            return id;
        };

        let mut n_left = 0;
        for k in 0..idx.len() {
            if self.x[idx[k]][feature] <= threshold {
                idx.swap(k, n_left);
                n_left += 1;
            }
        }
        let (l, r) = idx.split_at_mut(n_left);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[id].split = Some(Split {
            feature,
            threshold,
            left,
            right,
            gain,
        });
        id
    }

    fn best_split<R: Rng>(
        &self,
        idx: &[usize],
        mean: f64,
        parent_sse: f64,
        min_leaf: usize,
        rng: &mut R,
    ) -> Option<(usize, f64, f64)> {
        let features: Vec<usize> = match self.params.max_features {
            Some(m) if m < self.n_features => sample(rng, self.n_features, m.max(1)).into_vec(),
            _ => (0..self.n_features).collect(),
        };
        let n = idx.len();
        // Centered targets keep the running sums of squares well conditioned.
        let total: f64 = idx.iter().map(|&i| self.y[i] - mean).sum();
        let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
        let mut best: Option<(usize, f64, f64)> = None;
        for &f in &features {
            order.clear();
            order.extend(idx.iter().map(|&i| (self.x[i][f], self.y[i] - mean)));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut sum_left = 0.0;
            let mut sq_left = 0.0;
            let total_sq: f64 = order.iter().map(|o| o.1 * o.1).sum();
            for k in 0..n - 1 {
                sum_left += order[k].1;
                sq_left += order[k].1 * order[k].1;
                let n_l = k + 1;
                if n_l < min_leaf || n - n_l < min_leaf || order[k].0 == order[k + 1].0 {
                    continue;
                }
                let sum_right = total - sum_left;
                let sse_l = sq_left - sum_left * sum_left / n_l as f64;
                let sse_r = (total_sq - sq_left) - sum_right * sum_right / (n - n_l) as f64;
                let gain = parent_sse - sse_l - sse_r;
                if gain > best.map_or(0.0, |b| b.2) {
                    let (a, b) = (order[k].0, order[k + 1].0);
                    let mid = 0.5 * (a + b);
                    let threshold = if mid < b { mid } else { a };
                    best = Some((f, threshold, gain));
                }
            }
        }
        best.filter(|b| b.2 > 1e-12 * parent_sse)
    }
}

/// Serialized form of a tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NestedNode {
    Leaf {
        value: f64,
        cover: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        value: f64,
        cover: f64,
        left: Box<NestedNode>,
        right: Box<NestedNode>,
    },
}

impl From<Tree> for NestedNode {
    fn from(t: Tree) -> Self {
        fn go(t: &Tree, i: usize) -> NestedNode {
            let n = &t.nodes[i];
            match n.split {
                None => NestedNode::Leaf {
                    value: n.value,
                    cover: n.cover,
                },
                Some(s) => NestedNode::Split {
                    feature: s.feature,
                    threshold: s.threshold,
                    gain: s.gain,
                    value: n.value,
                    cover: n.cover,
                    left: Box::new(go(t, s.left)),
                    right: Box::new(go(t, s.right)),
                },
            }
        }
        go(&t, 0)
    }
}

impl TryFrom<NestedNode> for Tree {
    type Error = MaError;

    fn try_from(root: NestedNode) -> Result<Self> {
        fn go(n: NestedNode, nodes: &mut Vec<Node>) -> Result<usize> {
            let id = nodes.len();
            match n {
                NestedNode::Leaf { value, cover } => {
                    nodes.push(Node {
                        split: None,
                        value,
                        cover,
                    });
                }
                NestedNode::Split {
                    feature,
                    threshold,
                    gain,
                    value,
                    cover,
                    left,
                    right,
                } => {
                    if !threshold.is_finite() {
                        return Err(MaError::Format("tree threshold is not finite".into()));
                    }
                    nodes.push(Node {
                        split: None,
                        value,
                        cover,
                    });
                    let l = go(*left, nodes)?;
                    let r = go(*right, nodes)?;
                    nodes[id].split = Some(Split {
                        feature,
                        threshold,
                        left: l,
                        right: r,
                        gain,
                    });
                }
            }
            Ok(id)
        }
        let mut nodes = Vec::new();
        go(root, &mut nodes)?;
        Ok(Tree { nodes })
    }
}
