//! Closed-form prediction errors of the mean, regression and blended
//! aggregates, plus Monte Carlo oracles under Gaussian base learners.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::bootstrap_sample;
use crate::rng::RngStream;

/// Moments of the base learners and the data.
///
/// `eta` is the shared bias, `psi` the learner variance and `omega` the
/// pairwise covariance, all taken around the signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub eta: f64,
    pub psi: f64,
    pub omega: f64,
    pub j: usize,
    pub n: usize,
    pub sigma2: f64,
    pub phi: f64,
    pub mu: f64,
}

impl TheoryParams {
    /// Error of the plain average beyond `phi`:
    /// `eta^2 + psi/J + (J(J-1)/J^2) omega`.
    pub fn a_term(&self) -> f64 {
        let j = self.j as f64;
        self.eta * self.eta + self.psi / j + j * (j - 1.0) / (j * j) * self.omega
    }

    /// Error of the least-squares reweighting beyond `phi`:
    /// `sigma^2 / (N - J - 1)`.
    pub fn b_term(&self) -> Result<f64> {
        if self.n <= self.j + 1 {
            return Err(Error::Domain(format!(
                "N = {} must exceed J + 1 = {}; use min_norm_mse_limit for the J > N regime",
                self.n,
                self.j + 1
            )));
        }
        Ok(self.sigma2 / (self.n - self.j - 1) as f64)
    }
}

pub fn mse_mean_formula(p: &TheoryParams) -> Result<f64> {
    if p.j < 1 {
        return Err(Error::Domain("J must be at least 1".into()));
    }
    Ok(p.a_term() + p.phi)
}

pub fn mse_reg_formula(p: &TheoryParams) -> Result<f64> {
    Ok(p.b_term()? + p.phi)
}

pub fn mse_ada_formula(p: &TheoryParams, theta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Domain(format!("theta must lie in [0, 1], got {theta}")));
    }
    if p.j < 1 {
        return Err(Error::Domain("J must be at least 1".into()));
    }
    let (a, b) = (p.a_term(), p.b_term()?);
    Ok((1.0 - theta).powi(2) * a + theta * theta * b + p.phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalTheta {
    pub theta: f64,
    /// Both error terms vanish, so every theta is optimal.
    pub degenerate: bool,
}

/// Minimizer `A / (A + B)` of the blended error.
pub fn optimal_theta(p: &TheoryParams) -> Result<OptimalTheta> {
    let (a, b) = (p.a_term(), p.b_term()?);
    if a + b == 0.0 {
        return Ok(OptimalTheta {
            theta: 0.5,
            degenerate: true,
        });
    }
    Ok(OptimalTheta {
        theta: a / (a + b),
        degenerate: false,
    })
}

/// Upper end `2c / (c + 1)` of the blend weights that beat both endpoints
/// when `A = c B`.
pub fn remark3_threshold(c: f64) -> Result<f64> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Domain(format!("c must lie in (0, 1], got {c}")));
    }
    Ok(2.0 * c / (c + 1.0))
}

/// Large-`J, N` error of the minimum-norm interpolator at `r = J / N`.
pub fn min_norm_mse_limit(r: f64, sigma2: f64) -> Result<f64> {
    if !(r > 1.0) {
        return Err(Error::Domain(format!("r must exceed 1, got {r}")));
    }
    Ok(1.0 - 1.0 / r + sigma2 * r / (r - 1.0))
}

/// Finite-size error `(J - N)/J + sigma^2 J/(J - N)` for `J > N`.
pub fn min_norm_mse_finite(j: usize, n: usize, sigma2: f64) -> Result<f64> {
    if j <= n {
        return Err(Error::Domain(format!("J = {j} must exceed N = {n}")));
    }
    let (j, n) = (j as f64, n as f64);
    Ok((j - n) / j + sigma2 * j / (j - n))
}

/// Mean and Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McStat {
    pub mean: f64,
    pub se: f64,
}

fn mc_stat(values: &[f64]) -> McStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    McStat {
        mean,
        se: (var / n).sqrt(),
    }
}

/// Gaussian base-learner model: learner outputs `F ~ N(0, W)`, response
/// `y = gamma_0 + F gamma + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianOracleConfig {
    /// `J x J` covariance, row by row.
    pub w: Vec<Vec<f64>>,
    /// `(gamma_0, gamma_1, ..., gamma_J)`.
    pub gamma: Vec<f64>,
    pub n: usize,
    pub sigma: f64,
    pub trials: usize,
    pub test_points: usize,
}

impl GaussianOracleConfig {
    /// `W = I`, `gamma = (0, 1/J, ..., 1/J)`.
    pub fn identity(j: usize, n: usize, sigma: f64, trials: usize, test_points: usize) -> Self {
        let w = (0..j)
            .map(|a| (0..j).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
            .collect();
        let gamma = std::iter::once(0.0)
            .chain(std::iter::repeat(1.0 / j as f64).take(j))
            .collect();
        GaussianOracleConfig {
            w,
            gamma,
            n,
            sigma,
            trials,
            test_points,
        }
    }

    pub fn n_learners(&self) -> usize {
        self.w.len()
    }

    pub fn w_matrix(&self) -> DMatrix<f64> {
        let j = self.n_learners();
        DMatrix::from_fn(j, j, |a, b| self.w[a][b])
    }

    fn weights(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_learners(), self.gamma[1..].iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.n_learners();
        if j < 1 || self.w.iter().any(|r| r.len() != j) {
            return Err(Error::Config("W must be a non-empty square matrix".into()));
        }
        if self.gamma.len() != j + 1 {
            return Err(Error::Config(format!("gamma needs J + 1 = {} entries", j + 1)));
        }
        let w = self.w_matrix();
        if w.iter().any(|v| !v.is_finite()) || (&w - w.transpose()).amax() > 1e-12 {
            return Err(Error::Config("W must be finite and symmetric".into()));
        }
        let eig = SymmetricEigen::new(w).eigenvalues;
        let top = eig.amax();
        if eig.min() < -1e-10 * top.max(1.0) {
            return Err(Error::Config("W must be positive semidefinite".into()));
        }
        let sum: f64 = self.gamma[1..].iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("learner weights must sum to 1, got {sum}")));
        }
        if self.n <= j + 1 {
            return Err(Error::Config(format!("N = {} must exceed J + 1 = {}", self.n, j + 1)));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be >= 0".into()));
        }
        if self.trials < 100 {
            return Err(Error::Config("at least 100 trials are required".into()));
        }
        if self.test_points < 1 {
            return Err(Error::Config("test_points must be >= 1".into()));
        }
        Ok(())
    }

    /// Signal variance `gamma' W gamma` over the learner weights.
    pub fn phi(&self) -> f64 {
        let g = self.weights();
        (g.transpose() * self.w_matrix() * &g)[(0, 0)]
    }

    /// Learner moments implied by the oracle: deviations `f_j - g` have
    /// covariance `(I - 1 gamma') W (I - gamma 1')`; `psi` is its mean
    /// diagonal and `omega` its mean off-diagonal entry. `omega` can be
    /// negative (it is `-1/J` for `W = I` and uniform weights).
    pub fn theory_params(&self) -> TheoryParams {
        let j = self.n_learners();
        let g = self.weights();
        let m = DMatrix::<f64>::identity(j, j) - DMatrix::from_element(j, 1, 1.0) * g.transpose();
        let r = &m * self.w_matrix() * m.transpose();
        let psi = r.diagonal().sum() / j as f64;
        let off = r.sum() - r.diagonal().sum();
        let omega = if j > 1 { off / (j * (j - 1)) as f64 } else { 0.0 };
        TheoryParams {
            eta: -self.gamma[0],
            psi,
            omega,
            j,
            n: self.n,
            sigma2: self.sigma * self.sigma,
            phi: self.phi(),
            mu: self.gamma[0],
        }
    }
}

/// Errors of one aggregate, measured three ways over fresh test points:
/// around the signal mean `mu` (the quantity the closed forms describe),
/// against the signal, and against a fresh noisy response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub about_mean: McStat,
    pub vs_signal: McStat,
    pub vs_noisy: McStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendEstimate {
    pub theta: f64,
    pub estimate: OracleEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub mean: OracleEstimate,
    pub reg: OracleEstimate,
    pub ada: Vec<BlendEstimate>,
    pub trials: usize,
    /// Trials whose training design was singular and had to be redrawn.
    pub redraws: usize,
}

/// `k x 3` per-trial errors of one aggregate.
type TrialErrors = [f64; 3];

fn learner_factor(w: &DMatrix<f64>) -> DMatrix<f64> {
    // W = L L' through the eigendecomposition, so singular W works too
    let eig = SymmetricEigen::new(w.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

fn draw_learners(rows: usize, factor: &DMatrix<f64>, rng: &mut impl Rng) -> DMatrix<f64> {
    let j = factor.nrows();
    let z = DMatrix::from_fn(rows, j, |_, _| rng.sample::<f64, _>(StandardNormal));
    z * factor.transpose()
}

/// Monte Carlo over training draws of the mean, least-squares and blended
/// aggregates. Trial `t` uses `stream.child(t)`.
pub fn gaussian_oracle_mc(cfg: &GaussianOracleConfig, thetas: &[f64], stream: RngStream) -> Result<OracleResult> {
    cfg.validate()?;
    if thetas.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Domain("blend weights must lie in [0, 1]".into()));
    }
    let j = cfg.n_learners();
    let factor = learner_factor(&cfg.w_matrix());
    let weights = cfg.weights();
    let g0 = cfg.gamma[0];
    let k = 2 + thetas.len();

    let per_trial: Vec<(Vec<TrialErrors>, usize)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream.child(t as u64).rng();
            let mut redraws = 0;
            let coef = loop {
                let f = draw_learners(cfg.n, &factor, &mut rng);
                let x = DMatrix::from_fn(cfg.n, j + 1, |i, c| if c == 0 { 1.0 } else { f[(i, c - 1)] });
                let noise = DVector::from_fn(cfg.n, |_, _| cfg.sigma * rng.sample::<f64, _>(StandardNormal));
                let y = (&f * &weights).add_scalar(g0) + noise;
                match (x.transpose() * &x).cholesky() {
                    Some(ch) => break ch.solve(&(x.transpose() * y)),
                    None => redraws += 1,
                }
            };
            let fs = draw_learners(cfg.test_points, &factor, &mut rng);
            let mut acc = vec![[0.0; 3]; k];
            for i in 0..cfg.test_points {
                let row = fs.row(i);
                let signal = g0 + (row * &weights)[(0, 0)];
                let y_star = signal + cfg.sigma * rng.sample::<f64, _>(StandardNormal);
                let mean = row.sum() / j as f64;
                let reg = coef[0] + (0..j).map(|c| row[c] * coef[c + 1]).sum::<f64>();
                let mut record = |slot: usize, pred: f64| {
                    acc[slot][0] += (pred - g0).powi(2);
                    acc[slot][1] += (pred - signal).powi(2);
                    acc[slot][2] += (y_star - pred).powi(2);
                };
                record(0, mean);
                record(1, reg);
                for (s, &th) in thetas.iter().enumerate() {
                    record(2 + s, (1.0 - th) * mean + th * reg);
                }
            }
            let m = cfg.test_points as f64;
            for a in acc.iter_mut() {
                for v in a.iter_mut() {
                    *v /= m;
                }
            }
            (acc, redraws)
        })
        .collect();

    let summarize = |slot: usize| {
        let col = |c: usize| -> Vec<f64> { per_trial.iter().map(|(a, _)| a[slot][c]).collect() };
        OracleEstimate {
            about_mean: mc_stat(&col(0)),
            vs_signal: mc_stat(&col(1)),
            vs_noisy: mc_stat(&col(2)),
        }
    };
    Ok(OracleResult {
        mean: summarize(0),
        reg: summarize(1),
        ada: thetas
            .iter()
            .enumerate()
            .map(|(s, &theta)| BlendEstimate {
                theta,
                estimate: summarize(2 + s),
            })
            .collect(),
        trials: cfg.trials,
        redraws: per_trial.iter().map(|(_, r)| r).sum(),
    })
}

/// Minimum-norm least squares `pinv(F) y`, singular values below
/// `1e-10 * s_max` treated as zero.
pub fn min_norm_solve(f: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = f.clone().svd(true, true);
    let cutoff = 1e-10 * svd.singular_values.max();
    svd.solve(y, cutoff).expect("both singular bases were computed")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinNormConfig {
    pub n: usize,
    pub j: usize,
    pub sigma2: f64,
    pub trials: usize,
    pub test_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinNormResult {
    /// Error against a fresh noisy response.
    pub mse: McStat,
    pub finite_formula: f64,
    pub limit: f64,
}

/// `W = I`, weights `gamma_j ~ N(0, 1/J)` redrawn per trial, no intercept;
/// the interpolator is scored on fresh noisy responses.
pub fn min_norm_mc(cfg: &MinNormConfig, stream: RngStream) -> Result<MinNormResult> {
    if cfg.j <= cfg.n || cfg.n < 1 {
        return Err(Error::Domain(format!("need J = {} > N = {}", cfg.j, cfg.n)));
    }
    if cfg.trials < 2 || cfg.test_points < 1 || !(cfg.sigma2 >= 0.0) {
        return Err(Error::Config("need trials >= 2, test_points >= 1 and sigma2 >= 0".into()));
    }
    let sigma = cfg.sigma2.sqrt();
    let values: Vec<f64> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream.child(t as u64).rng();
            let sd = (1.0 / cfg.j as f64).sqrt();
            let gamma = DVector::from_fn(cfg.j, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
            let f = DMatrix::from_fn(cfg.n, cfg.j, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = DVector::from_fn(cfg.n, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
            let y = &f * &gamma + noise;
            let est = min_norm_solve(&f, &y);
            let diff = &gamma - &est;
            let mut sse = 0.0;
            for _ in 0..cfg.test_points {
                let x = DVector::from_fn(cfg.j, |_, _| rng.sample::<f64, _>(StandardNormal));
                let e = x.dot(&diff) + sigma * rng.sample::<f64, _>(StandardNormal);
                sse += e * e;
            }
            sse / cfg.test_points as f64
        })
        .collect();
    Ok(MinNormResult {
        mse: mc_stat(&values),
        finite_formula: min_norm_mse_finite(cfg.j, cfg.n, cfg.sigma2)?,
        limit: min_norm_mse_limit(cfg.j as f64 / cfg.n as f64, cfg.sigma2)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Specification {
    /// Learners regress on both features.
    Correct,
    /// Learners regress on the first feature only.
    Misspecified,
}

/// Bivariate linear model `y = b0 + b1 x1 + b2 x2 + noise` with
/// `x ~ N(0, [[1, r], [r, 1]])`, bootstrap OLS learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub mode: Specification,
    pub s_grid: Vec<f64>,
    pub beta: [f64; 3],
    #[serde(default)]
    pub feature_correlation: f64,
    pub n: usize,
    pub learners: usize,
    pub replications: usize,
    pub test_points: usize,
}

impl ScalingConfig {
    pub fn new(mode: Specification, s_grid: Vec<f64>) -> Self {
        ScalingConfig {
            mode,
            s_grid,
            beta: [0.0, 1.0, 1.0],
            feature_correlation: 0.0,
            n: 100,
            learners: 4,
            replications: 1000,
            test_points: 100,
        }
    }

    fn phi(&self) -> f64 {
        let [_, b1, b2] = self.beta;
        b1 * b1 + 2.0 * b1 * b2 * self.feature_correlation + b2 * b2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub s: f64,
    pub sigma2: f64,
    pub psi: f64,
    pub omega: f64,
    /// `sigma^2 / (N_j - q)` averaged over learners, `q` the number of
    /// fitted coefficients.
    pub noise_formula: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub mode: Specification,
    pub points: Vec<ScalingPoint>,
    pub psi_slope: f64,
    pub omega_slope: Option<f64>,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Variance `psi(s)` and covariance `omega(s)` of bootstrap OLS learners
/// across training draws, holding `phi` fixed with `sigma^2 = phi / s`.
/// Each learner is fit on the distinct rows of its bootstrap. The same
/// designs, bootstraps and standardized noise are reused for every `s`.
pub fn appendix_d_scaling(cfg: &ScalingConfig, stream: RngStream) -> Result<ScalingResult> {
    if cfg.s_grid.len() < 4 || cfg.s_grid.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("s_grid needs at least 4 positive values".into()));
    }
    let (lo, hi) = cfg
        .s_grid
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(a, b), &s| (a.min(s), b.max(s)));
    if hi / lo < 10.0 {
        return Err(Error::Config("s_grid must span at least one decade".into()));
    }
    if cfg.learners < 1 || cfg.replications < 2 || cfg.test_points < 1 || cfg.n < 8 {
        return Err(Error::Config("need n >= 8, learners >= 1, replications >= 2, test_points >= 1".into()));
    }
    let r = cfg.feature_correlation;
    if !(r.abs() < 1.0) {
        return Err(Error::Config("feature_correlation must lie in (-1, 1)".into()));
    }
    let phi = cfg.phi();
    if !(phi > 0.0) {
        return Err(Error::ZeroSignal);
    }
    let q = match cfg.mode {
        Specification::Correct => 3,
        Specification::Misspecified => 2,
    };
    let draw_x = |rng: &mut rand_chacha::ChaCha8Rng| {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        (z1, r * z1 + (1.0 - r * r).sqrt() * z2)
    };
    let mut test_rng = stream.child(0).rng();
    let test: Vec<(f64, f64)> = (0..cfg.test_points).map(|_| draw_x(&mut test_rng)).collect();
    let sigmas: Vec<f64> = cfg.s_grid.iter().map(|s| (phi / s).sqrt()).collect();
    let [b0, b1, b2] = cfg.beta;
    let ns = sigmas.len();
    let (m, l) = (cfg.test_points, cfg.learners);

    // preds[rep][s][learner * m + point], plus per-learner formula terms
    let reps: Vec<(Vec<Vec<f64>>, Vec<f64>)> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
            let rs = stream.child(1).child(rep as u64);
            let mut rng = rs.child(0).rng();
            let rows: Vec<(f64, f64)> = (0..cfg.n).map(|_| draw_x(&mut rng)).collect();
            let z: Vec<f64> = (0..cfg.n).map(|_| rng.sample(StandardNormal)).collect();
            let mut preds = vec![vec![0.0; l * m]; ns];
            let mut inv_dof = vec![0.0; l];
            for learner in 0..l {
                let bag = bootstrap_sample(cfg.n, rs.child(1 + learner as u64));
                let mut uniq = bag.clone();
                uniq.sort_unstable();
                uniq.dedup();
                let nj = uniq.len();
                if nj <= q + 1 {
                    return Err(Error::TooFewRows { needed: q + 2, got: nj });
                }
                inv_dof[learner] = 1.0 / (nj - q) as f64;
                let x = DMatrix::from_fn(nj, q, |i, c| match c {
                    0 => 1.0,
                    1 => rows[uniq[i]].0,
                    _ => rows[uniq[i]].1,
                });
                let gram = (x.transpose() * &x)
                    .cholesky()
                    .ok_or_else(|| Error::InvalidData("singular bootstrap design".into()))?;
                for (si, &sigma) in sigmas.iter().enumerate() {
                    let y = DVector::from_fn(nj, |i, _| {
                        let (x1, x2) = rows[uniq[i]];
                        b0 + b1 * x1 + b2 * x2 + sigma * z[uniq[i]]
                    });
                    let coef = gram.solve(&(x.transpose() * y));
                    for (pi, &(x1, x2)) in test.iter().enumerate() {
                        let mut f = coef[0] + coef[1] * x1;
                        if q == 3 {
                            f += coef[2] * x2;
                        }
                        preds[si][learner * m + pi] = f;
                    }
                }
            }
            Ok((preds, inv_dof))
        })
        .collect::<Result<_>>()?;

    let rf = cfg.replications as f64;
    let mean_inv_dof = reps.iter().map(|(_, d)| d.iter().sum::<f64>()).sum::<f64>() / (rf * l as f64);
    let mut points = Vec::with_capacity(ns);
    for (si, &s) in cfg.s_grid.iter().enumerate() {
        let mut means = vec![0.0; l * m];
        for (p, _) in &reps {
            for (acc, v) in means.iter_mut().zip(&p[si]) {
                *acc += v / rf;
            }
        }
        let mut var_sum = 0.0;
        let mut cov_sum = 0.0;
        let mut pairs = 0usize;
        for pi in 0..m {
            for a in 0..l {
                let ia = a * m + pi;
                var_sum += reps.iter().map(|(p, _)| (p[si][ia] - means[ia]).powi(2)).sum::<f64>() / (rf - 1.0);
                for b in (a + 1)..l {
                    let ib = b * m + pi;
                    cov_sum += reps
                        .iter()
                        .map(|(p, _)| (p[si][ia] - means[ia]) * (p[si][ib] - means[ib]))
                        .sum::<f64>()
                        / (rf - 1.0);
                    pairs += 1;
                }
            }
        }
        let sigma2 = sigmas[si] * sigmas[si];
        points.push(ScalingPoint {
            s,
            sigma2,
            psi: var_sum / (m * l) as f64,
            omega: if pairs > 0 { cov_sum / pairs as f64 } else { f64::NAN },
            noise_formula: sigma2 * mean_inv_dof,
        });
    }
    let s: Vec<f64> = points.iter().map(|p| p.s).collect();
    let psi: Vec<f64> = points.iter().map(|p| p.psi).collect();
    let omega_slope = (l > 1 && points.iter().all(|p| p.omega > 0.0))
        .then(|| log_log_slope(&s, &points.iter().map(|p| p.omega).collect::<Vec<_>>()));
    Ok(ScalingResult {
        mode: cfg.mode,
        psi_slope: log_log_slope(&s, &psi),
        omega_slope,
        points,
    })
}

/// Blend sweep of the Gaussian oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleRun {
    pub oracle: GaussianOracleConfig,
    #[serde(default = "default_thetas")]
    pub thetas: Vec<f64>,
}

fn default_thetas() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

/// Any subset of the Monte Carlo checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryRunConfig {
    #[serde(default)]
    pub oracle: Option<OracleRun>,
    #[serde(default)]
    pub min_norm: Option<MinNormConfig>,
    #[serde(default)]
    pub scaling: Vec<ScalingConfig>,
}

/// One closed form against its Monte Carlo estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRecord {
    pub check: String,
    pub params: serde_json::Value,
    pub formula_value: Option<f64>,
    pub mc_value: f64,
    pub mc_se: Option<f64>,
}

/// Flat CSV form of a [`TheoryRecord`].
#[derive(Debug, Clone, Serialize)]
pub struct TheoryRow {
    pub check: String,
    pub params: String,
    pub formula_value: Option<f64>,
    pub mc_value: f64,
    pub mc_se: Option<f64>,
}

impl From<&TheoryRecord> for TheoryRow {
    fn from(r: &TheoryRecord) -> Self {
        TheoryRow {
            check: r.check.clone(),
            params: r.params.to_string(),
            formula_value: r.formula_value,
            mc_value: r.mc_value,
            mc_se: r.mc_se,
        }
    }
}

impl TheoryRunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(run) = &self.oracle {
            run.oracle.validate()?;
            if run.thetas.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(Error::Config("thetas must lie in [0, 1]".into()));
            }
        }
        if let Some(m) = &self.min_norm {
            if m.j <= m.n {
                return Err(Error::Config("min_norm needs j > n".into()));
            }
        }
        if self.oracle.is_none() && self.min_norm.is_none() && self.scaling.is_empty() {
            return Err(Error::Config("nothing to run: add [oracle], [min_norm] or [[scaling]]".into()));
        }
        Ok(())
    }
}

/// Run the configured checks; the oracle uses `stream.child(0)`, the
/// minimum-norm check `child(1)` and scaling study `k` `child(2 + k)`.
pub fn run_theory(cfg: &TheoryRunConfig, stream: RngStream) -> Result<Vec<TheoryRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    if let Some(run) = &cfg.oracle {
        let res = gaussian_oracle_mc(&run.oracle, &run.thetas, stream.child(0))?;
        let p = run.oracle.theory_params();
        let params = serde_json::to_value(p)?;
        let reg_formula = mse_reg_formula(&p)?;
        let mut push = |check: &str, extra: Option<f64>, formula: f64, est: &OracleEstimate| {
            let mut params = params.clone();
            if let Some(t) = extra {
                params["theta"] = serde_json::json!(t);
            }
            out.push(TheoryRecord {
                check: check.to_string(),
                params,
                formula_value: Some(formula),
                mc_value: est.about_mean.mean,
                mc_se: Some(est.about_mean.se),
            });
        };
        push("oracle_mean", None, mse_mean_formula(&p)?, &res.mean);
        push("oracle_reg", None, reg_formula, &res.reg);
        for b in &res.ada {
            push("oracle_ada", Some(b.theta), mse_ada_formula(&p, b.theta)?, &b.estimate);
        }
    }
    if let Some(m) = &cfg.min_norm {
        let res = min_norm_mc(m, stream.child(1))?;
        out.push(TheoryRecord {
            check: "min_norm".into(),
            params: serde_json::to_value(m)?,
            formula_value: Some(res.limit),
            mc_value: res.mse.mean,
            mc_se: Some(res.mse.se),
        });
    }
    for (k, sc) in cfg.scaling.iter().enumerate() {
        let res = appendix_d_scaling(sc, stream.child(2 + k as u64))?;
        for pt in &res.points {
            out.push(TheoryRecord {
                check: "scaling_psi".into(),
                params: serde_json::json!({ "mode": sc.mode, "s": pt.s, "omega": pt.omega }),
                formula_value: None,
                mc_value: pt.psi,
                mc_se: None,
            });
        }
        let claimed = match sc.mode {
            Specification::Correct => -1.0,
            Specification::Misspecified => 1.0,
        };
        out.push(TheoryRecord {
            check: "scaling_slope".into(),
            params: serde_json::json!({ "mode": sc.mode, "s_grid": sc.s_grid }),
            formula_value: Some(claimed),
            mc_value: res.psi_slope,
            mc_se: None,
        });
    }
    Ok(out)
}
