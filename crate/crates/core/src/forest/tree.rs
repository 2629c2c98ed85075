//! CART regression trees grown best-first.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeParams {
    /// Candidate features per node. `None` means `max(1, floor(p / 3))`.
    #[serde(default)]
    pub mtry: Option<usize>,
    #[serde(default = "default_min_node_size")]
    pub min_node_size: usize,
    #[serde(default)]
    pub max_leaf_nodes: Option<usize>,
}

fn default_min_node_size() -> usize {
    5
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            mtry: None,
            min_node_size: default_min_node_size(),
            max_leaf_nodes: None,
        }
    }
}

impl TreeParams {
    pub fn resolved_mtry(&self, p: usize) -> usize {
        self.mtry.unwrap_or((p / 3).max(1))
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let mtry = self.resolved_mtry(p);
        if mtry < 1 || mtry > p {
            return Err(Error::InvalidParameter(format!(
                "mtry must lie in [1, {p}], got {mtry}"
            )));
        }
        if self.min_node_size < 1 {
            return Err(Error::InvalidParameter("min_node_size must be >= 1".into()));
        }
        if let Some(cap) = self.max_leaf_nodes {
            if cap < 2 {
                return Err(Error::InvalidParameter("max_leaf_nodes must be >= 2".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// A fitted tree. Node 0 is the root; `in_bag` holds the (sorted) training
/// rows with multiplicity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeDoc", into = "TreeDoc")]
pub struct RegressionTree {
    nodes: Vec<Node>,
    in_bag: Vec<usize>,
    n_features: usize,
}

/// Flat-array layout used for JSON. Leaves carry `feature = -1`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeDoc {
    n_features: usize,
    feature: Vec<i64>,
    threshold: Vec<f64>,
    left: Vec<i64>,
    right: Vec<i64>,
    value: Vec<f64>,
    in_bag: Vec<usize>,
}

impl From<RegressionTree> for TreeDoc {
    fn from(tree: RegressionTree) -> Self {
        let k = tree.nodes.len();
        let mut doc = TreeDoc {
            n_features: tree.n_features,
            feature: Vec::with_capacity(k),
            threshold: Vec::with_capacity(k),
            left: Vec::with_capacity(k),
            right: Vec::with_capacity(k),
            value: Vec::with_capacity(k),
            in_bag: tree.in_bag,
        };
        for node in &tree.nodes {
            match *node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    doc.feature.push(feature as i64);
                    doc.threshold.push(threshold);
                    doc.left.push(left as i64);
                    doc.right.push(right as i64);
                    doc.value.push(0.0);
                }
                Node::Leaf { value } => {
                    doc.feature.push(-1);
                    doc.threshold.push(0.0);
                    doc.left.push(-1);
                    doc.right.push(-1);
                    doc.value.push(value);
                }
            }
        }
        doc
    }
}

impl TryFrom<TreeDoc> for RegressionTree {
    type Error = String;

    fn try_from(doc: TreeDoc) -> std::result::Result<Self, String> {
        let k = doc.feature.len();
        if [doc.threshold.len(), doc.left.len(), doc.right.len(), doc.value.len()]
            .iter()
            .any(|&l| l != k)
        {
            return Err("tree arrays have different lengths".into());
        }
        let nodes = (0..k)
            .map(|i| {
                if doc.feature[i] < 0 {
                    Node::Leaf {
                        value: doc.value[i],
                    }
                } else {
                    Node::Split {
                        feature: doc.feature[i] as usize,
                        threshold: doc.threshold[i],
                        left: doc.left[i].max(0) as usize,
                        right: doc.right[i].max(0) as usize,
                    }
                }
            })
            .collect();
        let tree = RegressionTree {
            nodes,
            in_bag: doc.in_bag,
            n_features: doc.n_features,
        };
        tree.check_structure()?;
        Ok(tree)
    }
}

impl RegressionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn in_bag(&self) -> &[usize] {
        &self.in_bag
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.len() - self.n_leaves()
    }

    /// Route `x` down the tree; `x[feature] <= threshold` goes left.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self.predict_unchecked(|j| x[j]))
    }

    pub(crate) fn predict_unchecked(&self, x: impl Fn(usize) -> f64) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x(feature) <= threshold { left } else { right },
            }
        }
    }

    /// Proper binary tree reachable from node 0 with finite leaves.
    fn check_structure(&self) -> std::result::Result<(), String> {
        if self.nodes.is_empty() {
            return Err("tree has no nodes".into());
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if i >= self.nodes.len() || seen[i] {
                return Err(format!("node {i} is out of range or reached twice"));
            }
            seen[i] = true;
            match self.nodes[i] {
                Node::Leaf { value } if !value.is_finite() => {
                    return Err(format!("leaf {i} is not finite"))
                }
                Node::Leaf { .. } => {}
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if feature >= self.n_features || !threshold.is_finite() {
                        return Err(format!("node {i} has an invalid split"));
                    }
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err("unreachable nodes".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Split {
    feature: usize,
    threshold: f64,
    /// Reduction in sum of squared errors.
    gain: f64,
    /// Position in the feature-sorted row list where the right child starts.
    cut: usize,
}

struct Pending {
    node: usize,
    rows: Vec<usize>,
    split: Split,
}

/// Heap entry: largest gain first, then earliest-created node.
struct Candidate {
    gain: f64,
    node: usize,
    slot: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.node.cmp(&self.node))
    }
}

struct Grower<'a> {
    data: &'a Dataset,
    params: TreeParams,
    mtry: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl Grower<'_> {
    fn node_value(&self, rows: &[usize]) -> f64 {
        let y = self.data.response();
        rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64
    }

    /// Best split of `rows`, or `None` when the node must stay a leaf.
    fn best_split(&mut self, rows: &[usize]) -> Option<Split> {
        let m = rows.len();
        let min_child = self.params.min_node_size;
        if m < 2 * min_child {
            return None;
        }
        let y = self.data.response();
        let first = y[rows[0]];
        if rows.iter().all(|&i| y[i] == first) {
            return None;
        }
        let p = self.data.n_features();
        let mut features = sample(&mut self.rng, p, self.mtry).into_vec();
        features.sort_unstable();

        let total: f64 = rows.iter().map(|&i| y[i]).sum();
        let total_sq: f64 = rows.iter().map(|&i| y[i] * y[i]).sum();
        let parent_sse = total_sq - total * total / m as f64;

        let x = self.data.features();
        let mut best: Option<(f64, Split)> = None;
        let mut order: Vec<usize> = rows.to_vec();
        for &f in &features {
            order.copy_from_slice(rows);
            order.sort_by(|&a, &b| x[(a, f)].total_cmp(&x[(b, f)]));
            let mut left_sum = 0.0;
            let mut left_sq = 0.0;
            for k in 1..m {
                let yi = y[order[k - 1]];
                left_sum += yi;
                left_sq += yi * yi;
                if k < min_child || m - k < min_child {
                    continue;
                }
                let lo = x[(order[k - 1], f)];
                let hi = x[(order[k], f)];
                if lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let right_sq = total_sq - left_sq;
                let sse = (left_sq - left_sum * left_sum / k as f64)
                    + (right_sq - right_sum * right_sum / (m - k) as f64);
                if best.as_ref().is_none_or(|(b, _)| sse < *b) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some((
                        sse,
                        Split {
                            feature: f,
                            threshold,
                            gain: parent_sse - sse,
                            cut: k,
                        },
                    ));
                }
            }
        }
        best.map(|(_, s)| s).filter(|s| s.gain > 0.0)
    }

    fn partition(&self, rows: &[usize], split: &Split) -> (Vec<usize>, Vec<usize>) {
        let x = self.data.features();
        let (left, right): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| x[(i, split.feature)] <= split.threshold);
        debug_assert_eq!(left.len(), split.cut);
        (left, right)
    }
}

/// Grow a tree on `rows` (a multiset of row indices into `data`).
///
/// Nodes are expanded best-first by SSE reduction, so a leaf cap of `k`
/// keeps exactly the `k - 1` most valuable splits of the uncapped growth
/// order.
pub fn fit_tree(
    data: &Dataset,
    rows: &[usize],
    params: &TreeParams,
    stream: RngStream,
) -> Result<RegressionTree> {
    let n = data.n_rows();
    let p = data.n_features();
    params.validate(p)?;
    if rows.is_empty() {
        return Err(Error::InvalidParameter("cannot grow a tree on zero rows".into()));
    }
    if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidParameter(format!(
            "row index {bad} out of range for {n} rows"
        )));
    }
    let mut grower = Grower {
        data,
        params: *params,
        mtry: params.resolved_mtry(p),
        rng: stream.rng(),
    };
    let cap = params.max_leaf_nodes.unwrap_or(usize::MAX);

    let mut nodes = vec![Node::Leaf {
        value: grower.node_value(rows),
    }];
    let mut pending: Vec<Option<Pending>> = Vec::new();
    let mut heap = BinaryHeap::new();
    if let Some(split) = grower.best_split(rows) {
        heap.push(Candidate {
            gain: split.gain,
            node: 0,
            slot: 0,
        });
        pending.push(Some(Pending {
            node: 0,
            rows: rows.to_vec(),
            split,
        }));
    }
    let mut leaves = 1usize;
    while leaves < cap {
        let Some(top) = heap.pop() else { break };
        let Pending { node, rows, split } = pending[top.slot].take().expect("slot used once");
        let (left_rows, right_rows) = grower.partition(&rows, &split);
        drop(rows);
        let left = nodes.len();
        let right = left + 1;
        nodes.push(Node::Leaf {
            value: grower.node_value(&left_rows),
        });
        nodes.push(Node::Leaf {
            value: grower.node_value(&right_rows),
        });
        nodes[node] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        leaves += 1;
        for (child, child_rows) in [(left, left_rows), (right, right_rows)] {
            if let Some(s) = grower.best_split(&child_rows) {
                heap.push(Candidate {
                    gain: s.gain,
                    node: child,
                    slot: pending.len(),
                });
                pending.push(Some(Pending {
                    node: child,
                    rows: child_rows,
                    split: s,
                }));
            }
        }
    }

    let mut in_bag = rows.to_vec();
    in_bag.sort_unstable();
    Ok(RegressionTree {
        nodes,
        in_bag,
        n_features: p,
    })
}

/// Tree made of the given nodes; used for hand-built fixtures.
pub fn tree_from_nodes(nodes: Vec<Node>, in_bag: Vec<usize>, n_features: usize) -> Result<RegressionTree> {
    let tree = RegressionTree {
        nodes,
        in_bag,
        n_features,
    };
    tree.check_structure().map_err(Error::InvalidParameter)?;
    Ok(tree)
}
