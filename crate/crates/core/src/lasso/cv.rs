use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{lambda_path, solve_path, LassoProblem, PathSettings, SolverOptions};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// Lambda with the smallest mean held-out error.
    #[default]
    Min,
    /// Largest lambda within one standard error of the minimum.
    OneSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambdas: Vec<f64>,
    pub cv_errors: Vec<f64>,
    pub cv_se: Vec<f64>,
    pub chosen_lambda: f64,
    pub chosen_index: usize,
    pub fold_assignment: Vec<usize>,
}

impl CvResult {
    pub fn chosen_error(&self) -> f64 {
        self.cv_errors[self.chosen_index]
    }
}

/// Random near-equal partition of `0..n` into `k` folds.
pub fn assign_folds(n: usize, k: usize, stream: RngStream) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidParameter(format!(
            "{k} folds over {n} rows leaves an empty fold"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.rng());
    let mut folds = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        folds[row] = pos % k;
    }
    Ok(folds)
}

pub fn cv_select_lambda(
    problem: &LassoProblem,
    k: usize,
    stream: RngStream,
    path: &PathSettings,
    rule: LambdaRule,
    opts: &SolverOptions,
) -> Result<CvResult> {
    let folds = assign_folds(problem.n_rows(), k, stream)?;
    cv_with_folds(problem, &folds, path, rule, opts)
}

/// Cross-validate along the full-data lambda path with a fixed fold
/// assignment. The offset is applied to held-out rows as well.
pub fn cv_with_folds(
    problem: &LassoProblem,
    folds: &[usize],
    path: &PathSettings,
    rule: LambdaRule,
    opts: &SolverOptions,
) -> Result<CvResult> {
    check_folds(folds, problem.n_rows())?;
    let lambdas = lambda_path(problem, path.n_lambda, path.ratio)?;
    cv_on_lambdas(problem, folds, lambdas, rule, opts)
}

/// Cross-validate a given descending lambda sequence.
pub fn cv_on_lambdas(
    problem: &LassoProblem,
    folds: &[usize],
    lambdas: Vec<f64>,
    rule: LambdaRule,
    opts: &SolverOptions,
) -> Result<CvResult> {
    let n = problem.n_rows();
    let k = check_folds(folds, n)?;
    if lambdas.is_empty() || lambdas.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidParameter("lambdas must be non-empty and descending".into()));
    }
    let fold_errors: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
            let sub = problem.subset_rows(&train)?;
            let held = problem.subset_rows(&test)?;
            let sols = solve_path(&sub, &lambdas, opts)?;
            Ok(sols
                .iter()
                .map(|s| {
                    let fitted = held.fitted(s);
                    fitted
                        .iter()
                        .zip(held.target())
                        .map(|(a, y)| (y - a).powi(2))
                        .sum::<f64>()
                        / test.len() as f64
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let kf = k as f64;
    let mut cv_errors = Vec::with_capacity(lambdas.len());
    let mut cv_se = Vec::with_capacity(lambdas.len());
    for l in 0..lambdas.len() {
        let errs: Vec<f64> = fold_errors.iter().map(|e| e[l]).collect();
        let m = errs.iter().sum::<f64>() / kf;
        let var = errs.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (kf - 1.0);
        cv_errors.push(m);
        cv_se.push((var / kf).sqrt());
    }

    let mut best = 0;
    for l in 1..lambdas.len() {
        if cv_errors[l] < cv_errors[best] {
            best = l;
        }
    }
    let chosen_index = match rule {
        LambdaRule::Min => best,
        LambdaRule::OneSe => {
            let bar = cv_errors[best] + cv_se[best];
            (0..=best).find(|&l| cv_errors[l] <= bar).unwrap_or(best)
        }
    };
    Ok(CvResult {
        chosen_lambda: lambdas[chosen_index],
        chosen_index,
        lambdas,
        cv_errors,
        cv_se,
        fold_assignment: folds.to_vec(),
    })
}

fn check_folds(folds: &[usize], n: usize) -> Result<usize> {
    if folds.len() != n {
        return Err(Error::InvalidParameter(format!(
            "fold assignment has {} entries for {n} rows",
            folds.len()
        )));
    }
    let k = folds.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::InvalidParameter("need at least 2 folds".into()));
    }
    for f in 0..k {
        if !folds.contains(&f) {
            return Err(Error::InvalidParameter(format!("fold {f} has no rows")));
        }
    }
    Ok(k)
}

/// Fold-averaged MSE and its standard error for fixed predictions, scored
/// on the same fold layout as [`cv_with_folds`].
pub fn cv_fixed_predictions(predictions: &[f64], target: &[f64], folds: &[usize]) -> Result<(f64, f64)> {
    if predictions.len() != target.len() {
        return Err(Error::InvalidParameter("prediction and target lengths differ".into()));
    }
    let k = check_folds(folds, target.len())?;
    let mut sse = vec![0.0; k];
    let mut count = vec![0usize; k];
    for ((p, y), &f) in predictions.iter().zip(target).zip(folds) {
        sse[f] += (y - p).powi(2);
        count[f] += 1;
    }
    let errs: Vec<f64> = sse.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    let kf = k as f64;
    let m = errs.iter().sum::<f64>() / kf;
    let var = errs.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (kf - 1.0);
    Ok((m, (var / kf).sqrt()))
}
