//! Bagged regression forests with out-of-bag bookkeeping.

mod tree;

pub use tree::{fit_tree, tree_from_nodes, Node, RegressionTree, TreeParams};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const FOREST_FORMAT_VERSION: u32 = 1;

/// `n` draws with replacement from `0..n`.
pub fn bootstrap_sample(n: usize, stream: RngStream) -> Vec<usize> {
    let mut rng = stream.rng();
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Rows of `0..n` that never occur in `bag`.
pub fn out_of_bag(n: usize, bag: &[usize]) -> Vec<usize> {
    let mut present = vec![false; n];
    for &i in bag {
        present[i] = true;
    }
    (0..n).filter(|&i| !present[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Forest {
    pub format_version: u32,
    pub trees: Vec<RegressionTree>,
    pub params: TreeParams,
    /// Master seed of the stream the forest was grown from.
    pub seed: u64,
    /// Rows of the training data; OOB bookkeeping refers to these.
    pub n_train: usize,
    pub n_features: usize,
}

/// Grow `n_trees` trees; tree `j` uses `stream.child(j)` for both its
/// bootstrap and its split sampling, so the forest is identical for any
/// thread count.
pub fn fit_forest(
    data: &Dataset,
    n_trees: usize,
    params: &TreeParams,
    stream: RngStream,
) -> Result<Forest> {
    if n_trees < 1 {
        return Err(Error::InvalidParameter("a forest needs at least one tree".into()));
    }
    params.validate(data.n_features())?;
    let n = data.n_rows();
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|j| {
            let tree_stream = stream.child(j as u64);
            let bag = bootstrap_sample(n, tree_stream.child(0));
            fit_tree(data, &bag, params, tree_stream.child(1))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut params = *params;
    params.mtry = Some(params.resolved_mtry(data.n_features()));
    Ok(Forest {
        format_version: FOREST_FORMAT_VERSION,
        trees,
        params,
        seed: stream.master_seed,
        n_train: n,
        n_features: data.n_features(),
    })
}

impl Forest {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                got,
            });
        }
        Ok(())
    }

    /// Per-tree predictions at `x`.
    pub fn tree_predictions(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        Ok(self
            .trees
            .iter()
            .map(|t| t.predict_unchecked(|j| x[j]))
            .collect())
    }

    /// Simple average of all tree predictions.
    pub fn mean_predict(&self, x: &[f64]) -> Result<f64> {
        let preds = self.tree_predictions(x)?;
        Ok(preds.iter().sum::<f64>() / preds.len() as f64)
    }
}

pub fn forest_mean_predict(forest: &Forest, x: &[f64]) -> Result<f64> {
    forest.mean_predict(x)
}

/// Whether the rows handed to [`prediction_matrix`] are the forest's
/// training rows (mask from the bags) or held out from every tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowOrigin {
    Training,
    HeldOut,
}

/// `values[(i, j)]` is tree `j` evaluated at row `i`; `oob[(i, j)]` is true
/// iff row `i` is outside tree `j`'s bag.
#[derive(Debug, Clone, PartialEq)]
pub struct TreePredictionMatrix {
    pub values: DMatrix<f64>,
    pub oob_mask: DMatrix<bool>,
}

impl TreePredictionMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_trees(&self) -> usize {
        self.values.ncols()
    }

    /// Mean over all trees for each row.
    pub fn row_means(&self) -> Vec<f64> {
        let j = self.n_trees() as f64;
        (0..self.n_rows())
            .map(|i| self.values.row(i).iter().sum::<f64>() / j)
            .collect()
    }

    /// Mean over the trees for which row `i` is out of bag; `None` when the
    /// row is in every bag.
    pub fn oob_means(&self) -> Vec<Option<f64>> {
        (0..self.n_rows())
            .map(|i| {
                let mut sum = 0.0;
                let mut count = 0usize;
                for j in 0..self.n_trees() {
                    if self.oob_mask[(i, j)] {
                        sum += self.values[(i, j)];
                        count += 1;
                    }
                }
                (count > 0).then(|| sum / count as f64)
            })
            .collect()
    }
}

pub fn prediction_matrix(
    forest: &Forest,
    features: &DMatrix<f64>,
    origin: RowOrigin,
) -> Result<TreePredictionMatrix> {
    forest.check_dim(features.ncols())?;
    let n = features.nrows();
    if origin == RowOrigin::Training && n != forest.n_train {
        return Err(Error::InvalidData(format!(
            "forest was trained on {} rows, got {n}",
            forest.n_train
        )));
    }
    let columns: Vec<Vec<f64>> = forest
        .trees
        .par_iter()
        .map(|t| {
            (0..n)
                .map(|i| t.predict_unchecked(|f| features[(i, f)]))
                .collect()
        })
        .collect();
    let values = DMatrix::from_fn(n, forest.n_trees(), |i, j| columns[j][i]);
    let oob_mask = match origin {
        RowOrigin::HeldOut => DMatrix::from_element(n, forest.n_trees(), true),
        RowOrigin::Training => {
            let mut mask = DMatrix::from_element(n, forest.n_trees(), true);
            for (j, t) in forest.trees.iter().enumerate() {
                for &i in t.in_bag() {
                    mask[(i, j)] = false;
                }
            }
            mask
        }
    };
    Ok(TreePredictionMatrix { values, oob_mask })
}

/// Out-of-bag mean prediction per training row and the fraction of rows
/// that have at least one out-of-bag tree.
pub fn oob_predictions(forest: &Forest, data: &Dataset) -> Result<(Vec<Option<f64>>, f64)> {
    let matrix = prediction_matrix(forest, data.features(), RowOrigin::Training)?;
    let preds = matrix.oob_means();
    let covered = preds.iter().filter(|p| p.is_some()).count();
    let coverage = covered as f64 / preds.len() as f64;
    Ok((preds, coverage))
}

/// `counts[(s, j)]` = internal nodes of tree `j` splitting on feature `s`.
pub fn split_counts(forest: &Forest) -> DMatrix<u32> {
    let mut counts = DMatrix::zeros(forest.n_features, forest.n_trees());
    for (j, t) in forest.trees.iter().enumerate() {
        for node in t.nodes() {
            if let Node::Split { feature, .. } = node {
                counts[(*feature, j)] += 1;
            }
        }
    }
    counts
}
