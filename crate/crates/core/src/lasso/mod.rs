//! Penalized least squares by cyclic coordinate descent.
//!
//! Objective for a problem with design `X` (column 0 constant), target `y`
//! and offset `o`:
//!
//! ```text
//! (1/N) * ||y - o - X b||^2 + lambda * sum_j w_j |b_j|
//! ```
//!
//! `w_j` is the population standard deviation of column `j` for the tree
//! columns, so the penalty acts on standardized coefficients while `b` is
//! reported on the original column scale. The intercept carries `w_0 = 1`
//! when penalized and `w_0 = 0` otherwise.

mod cv;

pub use cv::{assign_folds, cv_fixed_predictions, cv_on_lambdas, cv_select_lambda, cv_with_folds, CvResult, LambdaRule};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LassoProblem {
    design: DMatrix<f64>,
    target: Vec<f64>,
    offset: Vec<f64>,
    penalize_intercept: bool,
}

impl LassoProblem {
    /// `design` must have a constant, positive column 0 (the intercept
    /// column, `theta` once the blend weight is absorbed).
    pub fn new(
        design: DMatrix<f64>,
        target: Vec<f64>,
        offset: Vec<f64>,
        penalize_intercept: bool,
    ) -> Result<Self> {
        let (n, cols) = design.shape();
        if n < 1 || cols < 1 {
            return Err(Error::InvalidParameter("empty design".into()));
        }
        if target.len() != n || offset.len() != n {
            return Err(Error::InvalidParameter(format!(
                "design has {n} rows, target {} and offset {}",
                target.len(),
                offset.len()
            )));
        }
        let c = design[(0, 0)];
        if !(c > 0.0) || design.column(0).iter().any(|&v| v != c) {
            return Err(Error::InvalidParameter(
                "column 0 must be a positive constant".into(),
            ));
        }
        if design.iter().chain(&target).chain(&offset).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite entry in lasso problem".into()));
        }
        Ok(LassoProblem {
            design,
            target,
            offset,
            penalize_intercept,
        })
    }

    /// Blend problem for weight `theta` in (0, 1]: design `theta * (1, T)`,
    /// offset `(1 - theta) * base`.
    pub fn blended(
        tree_predictions: &DMatrix<f64>,
        target: &[f64],
        base: &[f64],
        theta: f64,
        penalize_intercept: bool,
    ) -> Result<Self> {
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "blend weight must lie in (0, 1], got {theta}"
            )));
        }
        let (n, j) = tree_predictions.shape();
        let design = DMatrix::from_fn(n, j + 1, |i, c| {
            if c == 0 {
                theta
            } else {
                theta * tree_predictions[(i, c - 1)]
            }
        });
        let offset = base.iter().map(|b| (1.0 - theta) * b).collect();
        LassoProblem::new(design, target.to_vec(), offset, penalize_intercept)
    }

    pub fn n_rows(&self) -> usize {
        self.design.nrows()
    }

    /// Number of non-intercept columns.
    pub fn n_coefficients(&self) -> usize {
        self.design.ncols() - 1
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn penalize_intercept(&self) -> bool {
        self.penalize_intercept
    }

    pub fn subset_rows(&self, rows: &[usize]) -> Result<LassoProblem> {
        let design = DMatrix::from_fn(rows.len(), self.design.ncols(), |i, j| self.design[(rows[i], j)]);
        LassoProblem::new(
            design,
            rows.iter().map(|&i| self.target[i]).collect(),
            rows.iter().map(|&i| self.offset[i]).collect(),
            self.penalize_intercept,
        )
    }

    /// Fitted values `offset + X b` for every row.
    pub fn fitted(&self, solution: &LassoSolution) -> Vec<f64> {
        let b = solution.coefficients();
        (0..self.n_rows())
            .map(|i| {
                self.offset[i]
                    + b.iter()
                        .enumerate()
                        .map(|(j, bj)| self.design[(i, j)] * bj)
                        .sum::<f64>()
            })
            .collect()
    }

    fn column(&self, j: usize) -> &[f64] {
        let n = self.n_rows();
        &self.design.as_slice()[j * n..(j + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSolution {
    pub gamma0: f64,
    pub gamma: Vec<f64>,
    pub lambda: f64,
    pub objective: f64,
    pub n_nonzero: usize,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
}

impl LassoSolution {
    /// `(gamma0, gamma_1, ..., gamma_J)`.
    pub fn coefficients(&self) -> Vec<f64> {
        std::iter::once(self.gamma0).chain(self.gamma.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Stop when no coefficient moves more than this (standardized scale).
    pub tol: f64,
    /// Maximum number of sweeps.
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-7,
            max_iter: 100_000,
        }
    }
}

const THRESHOLD_SLACK: f64 = 1e-9;

/// Per-column quantities reused across solves of the same problem.
struct Prepared<'a> {
    problem: &'a LassoProblem,
    /// `(2/N) * ||x_j||^2`
    curvature: Vec<f64>,
    /// Penalty weight; intercept 1 or 0, tree columns their sd.
    weight: Vec<f64>,
    /// RMS of each column, used to measure coefficient moves.
    rms: Vec<f64>,
    /// Zero-variance tree columns stay at 0.
    usable: Vec<bool>,
}

impl<'a> Prepared<'a> {
    fn new(problem: &'a LassoProblem) -> Self {
        let n = problem.n_rows() as f64;
        let cols = problem.design.ncols();
        let mut curvature = Vec::with_capacity(cols);
        let mut weight = Vec::with_capacity(cols);
        let mut rms = Vec::with_capacity(cols);
        let mut usable = Vec::with_capacity(cols);
        for j in 0..cols {
            let x = problem.column(j);
            let sq: f64 = x.iter().map(|v| v * v).sum();
            curvature.push(2.0 * sq / n);
            rms.push((sq / n).sqrt());
            if j == 0 {
                weight.push(if problem.penalize_intercept { 1.0 } else { 0.0 });
                usable.push(true);
            } else {
                let constant = x.iter().all(|&v| v == x[0]);
                let m = x.iter().sum::<f64>() / n;
                let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                weight.push(sd);
                usable.push(!constant && sd > 0.0);
            }
        }
        Prepared {
            problem,
            curvature,
            weight,
            rms,
            usable,
        }
    }

    fn initial_residual(&self, beta: &[f64]) -> Vec<f64> {
        let p = self.problem;
        let mut r: Vec<f64> = p.target.iter().zip(&p.offset).map(|(y, o)| y - o).collect();
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (ri, xi) in r.iter_mut().zip(p.column(j)) {
                    *ri -= xi * b;
                }
            }
        }
        r
    }

    /// `(2/N) x_j' r + curvature_j * b_j`: the unpenalized coordinate optimum
    /// times the curvature.
    fn rho(&self, j: usize, r: &[f64], b: f64) -> f64 {
        let n = self.problem.n_rows() as f64;
        let dot: f64 = self.problem.column(j).iter().zip(r).map(|(x, e)| x * e).sum();
        2.0 / n * dot + self.curvature[j] * b
    }

    fn coordinate_optimum(&self, j: usize, rho: f64, lambda: f64) -> f64 {
        let w = self.weight[j];
        if w > 0.0 {
            // the slack keeps rounding noise (e.g. on duplicated columns)
            // from producing coefficients of order 1e-16
            if rho.abs() / w <= lambda * (1.0 + THRESHOLD_SLACK) {
                0.0
            } else {
                (rho - lambda * w * rho.signum()) / self.curvature[j]
            }
        } else {
            rho / self.curvature[j]
        }
    }

    /// One pass over `cols`; returns the largest coefficient move.
    fn sweep(&self, cols: impl Iterator<Item = usize>, lambda: f64, beta: &mut [f64], r: &mut [f64]) -> f64 {
        let mut max_change: f64 = 0.0;
        for j in cols {
            let old = beta[j];
            let rho = self.rho(j, r, old);
            let new = self.coordinate_optimum(j, rho, lambda);
            if new != old {
                let delta = new - old;
                for (ri, xi) in r.iter_mut().zip(self.problem.column(j)) {
                    *ri -= xi * delta;
                }
                beta[j] = new;
                max_change = max_change.max(delta.abs() * self.rms[j]);
            }
        }
        max_change
    }

    fn objective(&self, lambda: f64, beta: &[f64], r: &[f64]) -> f64 {
        let n = self.problem.n_rows() as f64;
        let sse: f64 = r.iter().map(|e| e * e).sum();
        let penalty: f64 = beta
            .iter()
            .zip(&self.weight)
            .map(|(b, w)| w * b.abs())
            .sum();
        sse / n + lambda * penalty
    }

    fn kkt(&self, lambda: f64, beta: &[f64], r: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..beta.len() {
            if !self.usable[j] {
                continue;
            }
            let g = self.rho(j, r, 0.0);
            let w = self.weight[j];
            let violation = if w == 0.0 {
                g.abs()
            } else if beta[j] != 0.0 {
                (g - lambda * w * beta[j].signum()).abs()
            } else {
                (g.abs() - lambda * w).max(0.0)
            };
            worst = worst.max(violation);
        }
        worst
    }

    fn usable_columns(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.usable.len()).filter(|&j| self.usable[j])
    }

    fn solve(
        &self,
        lambda: f64,
        opts: &SolverOptions,
        warm: Option<&[f64]>,
        mut trace: Option<&mut Vec<f64>>,
    ) -> LassoSolution {
        let cols = self.problem.design.ncols();
        let mut beta = match warm {
            Some(b) => b.to_vec(),
            None => vec![0.0; cols],
        };
        for j in 0..cols {
            if !self.usable[j] {
                beta[j] = 0.0;
            }
        }
        let mut r = self.initial_residual(&beta);
        let mut iterations = 0;
        let mut converged = false;
        while iterations < opts.max_iter {
            let change = self.sweep(self.usable_columns(), lambda, &mut beta, &mut r);
            iterations += 1;
            if let Some(t) = trace.as_deref_mut() {
                t.push(self.objective(lambda, &beta, &r));
            }
            if change < opts.tol {
                converged = true;
                break;
            }
            while iterations < opts.max_iter {
                let active: Vec<usize> = self.usable_columns().filter(|&j| beta[j] != 0.0).collect();
                let change = self.sweep(active.into_iter(), lambda, &mut beta, &mut r);
                iterations += 1;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(self.objective(lambda, &beta, &r));
                }
                if change < opts.tol {
                    break;
                }
            }
        }
        let n_nonzero = beta[1..].iter().filter(|b| **b != 0.0).count()
            + usize::from(self.problem.penalize_intercept && beta[0] != 0.0);
        LassoSolution {
            gamma0: beta[0],
            gamma: beta[1..].to_vec(),
            lambda,
            objective: self.objective(lambda, &beta, &r),
            n_nonzero,
            converged,
            iterations,
            kkt_residual: self.kkt(lambda, &beta, &r),
        }
    }
}

/// Smallest lambda at which every penalized coefficient is zero.
pub fn lambda_max(problem: &LassoProblem) -> f64 {
    let prep = Prepared::new(problem);
    let mut beta = vec![0.0; problem.design.ncols()];
    let mut r = prep.initial_residual(&beta);
    if !problem.penalize_intercept {
        // residualize on the intercept exactly as the first sweep would
        prep.sweep(std::iter::once(0), 0.0, &mut beta, &mut r);
    }
    if r.iter().all(|&e| e == 0.0) {
        return 0.0;
    }
    prep.usable_columns()
        .filter(|&j| prep.weight[j] > 0.0)
        .map(|j| prep.rho(j, &r, 0.0).abs() / prep.weight[j])
        .fold(0.0, f64::max)
}

pub fn coordinate_descent(problem: &LassoProblem, lambda: f64, opts: &SolverOptions) -> Result<LassoSolution> {
    coordinate_descent_warm(problem, lambda, opts, None)
}

pub fn coordinate_descent_warm(
    problem: &LassoProblem,
    lambda: f64,
    opts: &SolverOptions,
    warm: Option<&LassoSolution>,
) -> Result<LassoSolution> {
    check_inputs(problem, lambda, opts)?;
    let init = warm.map(LassoSolution::coefficients);
    Ok(Prepared::new(problem).solve(lambda, opts, init.as_deref(), None))
}

/// Solve and record the objective after every sweep.
pub fn coordinate_descent_traced(
    problem: &LassoProblem,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<(LassoSolution, Vec<f64>)> {
    check_inputs(problem, lambda, opts)?;
    let mut trace = Vec::new();
    let sol = Prepared::new(problem).solve(lambda, opts, None, Some(&mut trace));
    Ok((sol, trace))
}

fn check_inputs(problem: &LassoProblem, lambda: f64, opts: &SolverOptions) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::InvalidParameter("solver needs tol > 0 and max_iter >= 1".into()));
    }
    if problem.design.ncols() < 1 {
        return Err(Error::InvalidParameter("empty design".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSettings {
    #[serde(default = "default_n_lambda")]
    pub n_lambda: usize,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
}

fn default_n_lambda() -> usize {
    100
}

fn default_ratio() -> f64 {
    1e-4
}

impl Default for PathSettings {
    fn default() -> Self {
        PathSettings {
            n_lambda: default_n_lambda(),
            ratio: default_ratio(),
        }
    }
}

/// Log-spaced lambdas from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_path(problem: &LassoProblem, n_lambda: usize, ratio: f64) -> Result<Vec<f64>> {
    if n_lambda < 2 {
        return Err(Error::InvalidParameter("n_lambda must be >= 2".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    let top = lambda_max(problem);
    if top == 0.0 {
        return Ok(vec![0.0]);
    }
    let steps = (n_lambda - 1) as f64;
    Ok((0..n_lambda)
        .map(|k| top * ratio.powf(k as f64 / steps))
        .collect())
}

/// Warm-started solutions along a descending lambda sequence.
pub fn solve_path(problem: &LassoProblem, lambdas: &[f64], opts: &SolverOptions) -> Result<Vec<LassoSolution>> {
    let prep = Prepared::new(problem);
    let mut out: Vec<LassoSolution> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        check_inputs(problem, lambda, opts)?;
        let init = out.last().map(LassoSolution::coefficients);
        out.push(prep.solve(lambda, opts, init.as_deref(), None));
    }
    Ok(out)
}
