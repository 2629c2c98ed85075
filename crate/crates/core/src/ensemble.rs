//! Vanilla, post-selection and Lassoed forests with cross-fitting.
//!
//! All three estimators share one pipeline: grow a forest on the first half
//! of the rows, evaluate every tree on the second half, and fit blend
//! problems there for each `theta` of the grid. `theta = 0` is the plain
//! average of the trees, `theta = 1` the post-selection forest.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, ResponseTransform};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, prediction_matrix, split_counts, Forest, RowOrigin, TreeParams};
use crate::lasso::{
    assign_folds, cv_fixed_predictions, cv_on_lambdas, lambda_max, lambda_path, solve_path,
    coordinate_descent, LambdaRule, LassoProblem, LassoSolution, PathSettings, SolverOptions,
};
use crate::rng::{derive_stream, RngStream};

pub const MODEL_FORMAT_VERSION: u32 = 1;

const SPLIT_STREAM: u64 = 0;
const FOREST_STREAM: u64 = 1;
const FOLD_STREAM: u64 = 2;

/// How the error of the `theta = 0` candidate is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaZeroError {
    /// Score the tree average on the same folds as every other candidate.
    #[default]
    Cv,
    /// Out-of-bag error of the forest on its own training rows.
    Oob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_n_trees")]
    pub n_trees: usize,
    #[serde(default)]
    pub tree: TreeParams,
    #[serde(default = "default_theta_grid")]
    pub theta_grid: Vec<f64>,
    #[serde(default = "default_cv_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub path: PathSettings,
    #[serde(default)]
    pub lambda_rule: LambdaRule,
    /// Skip cross-validation of lambda and use this fraction of the
    /// problem's `lambda_max` instead.
    #[serde(default)]
    pub lambda_fraction: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub standardize_response: bool,
    #[serde(default = "yes")]
    pub penalize_intercept: bool,
    /// Grow the forest and fit the blend on disjoint halves. When off, both
    /// stages see every row and the offset is the out-of-bag average.
    #[serde(default = "yes")]
    pub cross_fit: bool,
    /// Fraction of rows given to the forest stage.
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub theta_zero_error: ThetaZeroError,
    #[serde(default)]
    pub solver: SolverOptions,
}

fn default_n_trees() -> usize {
    200
}

fn default_theta_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_cv_folds() -> usize {
    10
}

fn default_split_ratio() -> f64 {
    0.5
}

fn yes() -> bool {
    true
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_trees: default_n_trees(),
            tree: TreeParams::default(),
            theta_grid: default_theta_grid(),
            cv_folds: default_cv_folds(),
            path: PathSettings::default(),
            lambda_rule: LambdaRule::default(),
            lambda_fraction: None,
            seed: 0,
            standardize_response: true,
            penalize_intercept: true,
            cross_fit: true,
            split_ratio: default_split_ratio(),
            theta_zero_error: ThetaZeroError::default(),
            solver: SolverOptions::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::Config("n_trees must be at least 1".into()));
        }
        if self.theta_grid.is_empty() {
            return Err(Error::Config("theta_grid is empty".into()));
        }
        if self.theta_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config("theta_grid entries must lie in [0, 1]".into()));
        }
        if self.theta_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("theta_grid must be strictly increasing".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be at least 2".into()));
        }
        if let Some(f) = self.lambda_fraction {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::Config("lambda_fraction must be a finite value >= 0".into()));
            }
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config("split_ratio must lie in (0, 1)".into()));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(Error::Config("solver needs tol > 0 and max_iter >= 1".into()));
        }
        Ok(())
    }
}

/// Random partition of `0..n` into a forest half of size `ceil(n/2)` and a
/// selection half of size `floor(n/2)`, each sorted.
pub fn split_halves(n: usize, stream: RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
    split_rows(n, 0.5, stream)
}

pub fn split_rows(n: usize, ratio: f64, stream: RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 4 {
        return Err(Error::TooFewRows { needed: 4, got: n });
    }
    let first = ((n as f64 * ratio).ceil() as usize).clamp(2, n - 2);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.rng());
    let mut a = order[..first].to_vec();
    let mut b = order[first..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub theta: f64,
    pub error: f64,
    pub se: f64,
    /// Lambda chosen for this theta (0 for the pure average).
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSplit {
    pub forest_rows: Vec<usize>,
    pub selection_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoedModel {
    pub format_version: u32,
    pub forest: Forest,
    pub theta_hat: f64,
    pub gamma0_hat: f64,
    pub gamma_hat: Vec<f64>,
    pub lambda_hat: f64,
    pub transform: ResponseTransform,
    pub cv_curve: Vec<CvPoint>,
    pub split: RowSplit,
}

impl LassoedModel {
    pub fn n_features(&self) -> usize {
        self.forest.n_features
    }

    /// Prediction on the internal (standardized) response scale.
    pub fn predict_standardized(&self, x: &[f64]) -> Result<f64> {
        let trees = self.forest.tree_predictions(x)?;
        let mean = trees.iter().sum::<f64>() / trees.len() as f64;
        let reg = self.gamma0_hat
            + trees
                .iter()
                .zip(&self.gamma_hat)
                .map(|(t, g)| t * g)
                .sum::<f64>();
        Ok(self.theta_hat * reg + (1.0 - self.theta_hat) * mean)
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.transform.invert(self.predict_standardized(x)?))
    }

    pub fn predict_rows(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                got: features.ncols(),
            });
        }
        (0..features.nrows())
            .into_par_iter()
            .map(|i| {
                let row: Vec<f64> = features.row(i).iter().copied().collect();
                self.predict(&row)
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: LassoedModel = serde_json::from_str(text)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidData(format!(
                "model format version {} is not supported (expected {MODEL_FORMAT_VERSION})",
                model.format_version
            )));
        }
        if model.gamma_hat.len() != model.forest.n_trees() {
            return Err(Error::InvalidData(format!(
                "model has {} coefficients for {} trees",
                model.gamma_hat.len(),
                model.forest.n_trees()
            )));
        }
        Ok(model)
    }
}

pub fn predict_lassoed(model: &LassoedModel, x: &[f64]) -> Result<f64> {
    model.predict(x)
}

/// Per-theta fit kept until the final choice is made.
#[derive(Debug, Clone)]
struct Candidate {
    theta: f64,
    error: f64,
    se: f64,
    lambda: f64,
    /// Warm path ending at `lambda`.
    lambdas: Vec<f64>,
}

/// Everything up to the choice of `theta`: the forest, the selection-half
/// tree predictions and the cross-validated candidates.
#[derive(Debug, Clone)]
pub struct SelectionStage {
    forest: Forest,
    transform: ResponseTransform,
    split: RowSplit,
    trees: DMatrix<f64>,
    base: Vec<f64>,
    target: Vec<f64>,
    candidates: Vec<Candidate>,
    penalize_intercept: bool,
    solver: SolverOptions,
}

impl SelectionStage {
    pub fn fit(data: &Dataset, config: &FitConfig) -> Result<Self> {
        config.validate()?;
        let (work, transform) = if config.standardize_response {
            data::standardize_response(data)?
        } else {
            (data.clone(), ResponseTransform::identity())
        };
        let n = work.n_rows();
        let split = if config.cross_fit {
            let (a, b) = split_rows(n, config.split_ratio, derive_stream(config.seed, SPLIT_STREAM))?;
            RowSplit {
                forest_rows: a,
                selection_rows: b,
            }
        } else {
            RowSplit {
                forest_rows: (0..n).collect(),
                selection_rows: (0..n).collect(),
            }
        };
        let first = work.subset(&split.forest_rows)?;
        let forest = fit_forest(
            &first,
            config.n_trees,
            &config.tree,
            derive_stream(config.seed, FOREST_STREAM),
        )?;

        let (trees, base, second_target) = if config.cross_fit {
            let second = work.subset(&split.selection_rows)?;
            let m = prediction_matrix(&forest, second.features(), RowOrigin::HeldOut)?;
            let base = m.row_means();
            (m.values, base, second.response().to_vec())
        } else {
            let m = prediction_matrix(&forest, work.features(), RowOrigin::Training)?;
            let all = m.row_means();
            let base = m
                .oob_means()
                .into_iter()
                .zip(all)
                .map(|(o, a)| o.unwrap_or(a))
                .collect();
            (m.values, base, work.response().to_vec())
        };

        let folds = assign_folds(second_target.len(), config.cv_folds, derive_stream(config.seed, FOLD_STREAM))?;
        let oob_error = match config.theta_zero_error {
            ThetaZeroError::Cv => None,
            ThetaZeroError::Oob => Some(forest_oob_error(&forest, &first)?),
        };

        let candidates = config
            .theta_grid
            .par_iter()
            .map(|&theta| -> Result<Candidate> {
                if theta == 0.0 {
                    let (error, se) = match oob_error {
                        Some(e) => (e, 0.0),
                        None => cv_fixed_predictions(&base, &second_target, &folds)?,
                    };
                    return Ok(Candidate {
                        theta,
                        error,
                        se,
                        lambda: 0.0,
                        lambdas: Vec::new(),
                    });
                }
                let problem = LassoProblem::blended(&trees, &second_target, &base, theta, config.penalize_intercept)?;
                let lambdas = match config.lambda_fraction {
                    Some(f) => vec![f * lambda_max(&problem)],
                    None => lambda_path(&problem, config.path.n_lambda, config.path.ratio)?,
                };
                let cv = cv_on_lambdas(&problem, &folds, lambdas, config.lambda_rule, &config.solver)?;
                Ok(Candidate {
                    theta,
                    error: cv.chosen_error(),
                    se: cv.cv_se[cv.chosen_index],
                    lambda: cv.chosen_lambda,
                    lambdas: cv.lambdas[..=cv.chosen_index].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(SelectionStage {
            forest,
            transform,
            split,
            trees,
            base,
            target: second_target,
            candidates,
            penalize_intercept: config.penalize_intercept,
            solver: config.solver,
        })
    }

    pub fn forest(&self) -> &Forest {
        &self.forest
    }

    /// Response scaling the errors of [`SelectionStage::cv_curve`] live in.
    pub fn transform(&self) -> ResponseTransform {
        self.transform
    }

    pub fn cv_curve(&self) -> Vec<CvPoint> {
        self.candidates
            .iter()
            .map(|c| CvPoint {
                theta: c.theta,
                error: c.error,
                se: c.se,
                lambda: c.lambda,
            })
            .collect()
    }

    /// Grid value with the smallest estimated error; ties go to the smaller
    /// `theta`.
    pub fn best_theta(&self) -> f64 {
        let mut best = &self.candidates[0];
        for c in &self.candidates[1..] {
            if c.error < best.error {
                best = c;
            }
        }
        best.theta
    }

    /// Model refit at the selected `theta`, carrying the whole error curve.
    pub fn select(&self) -> Result<LassoedModel> {
        let mut model = self.model_at(self.best_theta())?;
        model.cv_curve = self.cv_curve();
        Ok(model)
    }

    /// Model refit on the whole selection half at a grid value of `theta`;
    /// its error curve holds that single point.
    pub fn model_at(&self, theta: f64) -> Result<LassoedModel> {
        let cand = self
            .candidates
            .iter()
            .find(|c| c.theta == theta)
            .ok_or_else(|| Error::InvalidParameter(format!("theta {theta} is not on the grid")))?;
        let j = self.forest.n_trees();
        let (gamma0, gamma, lambda) = if theta == 0.0 {
            (0.0, vec![0.0; j], 0.0)
        } else {
            let sol = self.refit(cand)?;
            (sol.gamma0, sol.gamma, sol.lambda)
        };
        Ok(LassoedModel {
            format_version: MODEL_FORMAT_VERSION,
            forest: self.forest.clone(),
            theta_hat: theta,
            gamma0_hat: gamma0,
            gamma_hat: gamma,
            lambda_hat: lambda,
            transform: self.transform,
            cv_curve: vec![CvPoint {
                theta,
                error: cand.error,
                se: cand.se,
                lambda: cand.lambda,
            }],
            split: self.split.clone(),
        })
    }

    fn refit(&self, cand: &Candidate) -> Result<LassoSolution> {
        let problem = LassoProblem::blended(&self.trees, &self.target, &self.base, cand.theta, self.penalize_intercept)?;
        if cand.lambdas.len() == 1 {
            return coordinate_descent(&problem, cand.lambdas[0], &self.solver);
        }
        let mut path = solve_path(&problem, &cand.lambdas, &self.solver)?;
        Ok(path.pop().expect("non-empty path"))
    }
}

fn forest_oob_error(forest: &Forest, data: &Dataset) -> Result<f64> {
    let (preds, _) = crate::forest::oob_predictions(forest, data)?;
    let (mut sse, mut count) = (0.0, 0usize);
    for (p, y) in preds.iter().zip(data.response()) {
        if let Some(p) = p {
            sse += (y - p).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidData("no row is out of bag for any tree".into()));
    }
    Ok(sse / count as f64)
}

/// Lassoed forest: `theta` chosen over the configured grid.
pub fn fit_lassoed(data: &Dataset, config: &FitConfig) -> Result<LassoedModel> {
    SelectionStage::fit(data, config)?.select()
}

/// Post-selection forest: the blend fixed at `theta = 1`.
pub fn fit_post_selection(data: &Dataset, config: &FitConfig) -> Result<LassoedModel> {
    let config = FitConfig {
        theta_grid: vec![1.0],
        ..config.clone()
    };
    SelectionStage::fit(data, &config)?.select()
}

/// Sign convention for the Lasso-weighted split counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceWeights {
    #[default]
    Signed,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub kappa: Vec<f64>,
    pub theta_used: f64,
    /// Some entry came out negative (possible with signed weights).
    pub has_negative: bool,
}

/// Split-count importance blended between the Lasso-weighted and the raw
/// counts with the model's `theta`.
pub fn variable_importance(model: &LassoedModel, weights: ImportanceWeights) -> Result<ImportanceVector> {
    let counts = split_counts(&model.forest);
    let (p, j) = counts.shape();
    let raw: Vec<f64> = (0..p)
        .map(|s| (0..j).map(|t| counts[(s, t)] as f64).sum())
        .collect();
    let raw_total: f64 = raw.iter().sum();
    if raw_total == 0.0 {
        return Err(Error::DegenerateImportance(
            "no tree has a split, so split counts are all zero".into(),
        ));
    }
    let theta = model.theta_hat;
    let mut kappa: Vec<f64> = raw.iter().map(|c| (1.0 - theta) * c / raw_total).collect();
    if theta > 0.0 {
        let w: Vec<f64> = model
            .gamma_hat
            .iter()
            .map(|g| match weights {
                ImportanceWeights::Signed => *g,
                ImportanceWeights::Absolute => g.abs(),
            })
            .collect();
        let weighted: Vec<f64> = (0..p)
            .map(|s| (0..j).map(|t| w[t] * counts[(s, t)] as f64).sum())
            .collect();
        let total: f64 = weighted.iter().sum();
        if total == 0.0 {
            let hint = match weights {
                ImportanceWeights::Signed => "; signed weights may cancel, try absolute weights",
                ImportanceWeights::Absolute => "",
            };
            return Err(Error::DegenerateImportance(format!(
                "Lasso-weighted split counts sum to zero{hint}"
            )));
        }
        for (k, wc) in kappa.iter_mut().zip(&weighted) {
            *k += theta * wc / total;
        }
    }
    let has_negative = kappa.iter().any(|&k| k < 0.0);
    Ok(ImportanceVector {
        kappa,
        theta_used: theta,
        has_negative,
    })
}

#[cfg(test)]
mod tests;
