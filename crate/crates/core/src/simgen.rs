//! Synthetic regression data: sparse quadratic polynomials and chained
//! tree ensembles, with noise calibrated to a target signal-to-noise ratio.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::forest::{bootstrap_sample, fit_tree, RegressionTree, TreeParams};
use crate::rng::RngStream;

const MAX_REDRAWS: usize = 100;

/// Signal variance `phi`, ratio `s` and the implied noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrSpec {
    pub phi: f64,
    pub s: f64,
    pub sigma2: f64,
}

impl SnrSpec {
    pub fn new(phi: f64, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidParameter(format!("snr must be positive, got {s}")));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::ZeroSignal);
        }
        Ok(SnrSpec {
            phi,
            s,
            sigma2: phi / s,
        })
    }
}

/// Noise variance giving ratio `snr` for this signal (sample variance).
pub fn calibrate_noise(signal: &[f64], snr: f64) -> Result<f64> {
    if signal.len() < 2 {
        return Err(Error::TooFewRows {
            needed: 2,
            got: signal.len(),
        });
    }
    let var = crate::data::sample_sd(signal).powi(2);
    Ok(SnrSpec::new(var, snr)?.sigma2)
}

fn add_noise(signal: &[f64], sigma2: f64, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma2.sqrt()).expect("finite variance");
    signal.iter().map(|g| g + normal.sample(rng)).collect()
}

fn gaussian_matrix(n: usize, p: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    // row-major draw order so that a prefix of rows is stable in n
    let mut m = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

fn sparse_uniform(c: f64, pi: f64, rng: &mut impl Rng) -> f64 {
    let keep = rng.gen_bool(pi);
    let u: f64 = rng.gen_range(0.0..c);
    if keep {
        u
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCoefficient {
    pub j: usize,
    pub k: usize,
    pub value: f64,
}

/// `y = sum_j alpha_j x_j + sum_{j<k} beta_jk x_j x_k + noise` with
/// `x ~ N(0, I_p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyDgpSpec {
    pub n: usize,
    pub p: usize,
    pub c: f64,
    pub pi: f64,
    pub snr: SnrSpec,
    pub alpha: Vec<f64>,
    /// Nonzero pair terms only, ordered by `(j, k)`.
    pub beta: Vec<PairCoefficient>,
}

impl PolyDgpSpec {
    /// Draw sparse coefficients: each entry is `Unif(0, c)` with probability
    /// `pi`, else zero. All-zero draws are retried.
    pub fn draw(n: usize, p: usize, c: f64, pi: f64, s: f64, stream: RngStream) -> Result<Self> {
        if p < 1 || n < 2 {
            return Err(Error::InvalidParameter("need n >= 2 and p >= 1".into()));
        }
        if !(c > 0.0) || !(0.0..=1.0).contains(&pi) {
            return Err(Error::InvalidParameter("need c > 0 and pi in [0, 1]".into()));
        }
        let mut rng = stream.rng();
        for _ in 0..MAX_REDRAWS {
            let alpha: Vec<f64> = (0..p).map(|_| sparse_uniform(c, pi, &mut rng)).collect();
            let mut beta = Vec::new();
            for j in 0..p {
                for k in (j + 1)..p {
                    let value = sparse_uniform(c, pi, &mut rng);
                    if value != 0.0 {
                        beta.push(PairCoefficient { j, k, value });
                    }
                }
            }
            if alpha.iter().any(|&a| a != 0.0) || !beta.is_empty() {
                return Self::fixed(n, p, alpha, beta, s).map(|spec| PolyDgpSpec { c, pi, ..spec });
            }
        }
        Err(Error::ZeroSignal)
    }

    /// Spec with given coefficients.
    pub fn fixed(n: usize, p: usize, alpha: Vec<f64>, beta: Vec<PairCoefficient>, s: f64) -> Result<Self> {
        if alpha.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: alpha.len(),
            });
        }
        if beta.iter().any(|b| b.j >= b.k || b.k >= p) {
            return Err(Error::InvalidParameter("pair terms need j < k < p".into()));
        }
        let c = alpha
            .iter()
            .copied()
            .chain(beta.iter().map(|b| b.value))
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        let mut spec = PolyDgpSpec {
            n,
            p,
            c,
            pi: 1.0,
            snr: SnrSpec {
                phi: 0.0,
                s,
                sigma2: 0.0,
            },
            alpha,
            beta,
        };
        spec.snr = SnrSpec::new(analytic_signal_variance(&spec), s)?;
        Ok(spec)
    }

    /// Same coefficients, different noise level.
    pub fn with_snr(&self, s: f64) -> Result<Self> {
        Ok(PolyDgpSpec {
            snr: SnrSpec::new(self.snr.phi, s)?,
            ..self.clone()
        })
    }

    pub fn with_n(&self, n: usize) -> Self {
        PolyDgpSpec { n, ..self.clone() }
    }

    pub fn signal(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.alpha.iter().zip(x).map(|(a, v)| a * v).sum();
        let quad: f64 = self.beta.iter().map(|b| b.value * x[b.j] * x[b.k]).sum();
        lin + quad
    }
}

/// `sum alpha_j^2 + sum beta_jk^2`: the monomials are uncorrelated with unit
/// variance under standard normal features.
pub fn analytic_signal_variance(spec: &PolyDgpSpec) -> f64 {
    spec.alpha.iter().map(|a| a * a).sum::<f64>() + spec.beta.iter().map(|b| b.value * b.value).sum::<f64>()
}

pub fn gen_polynomial(spec: &PolyDgpSpec, stream: RngStream) -> Result<Dataset> {
    let mut rng = stream.rng();
    let x = gaussian_matrix(spec.n, spec.p, &mut rng);
    let signal: Vec<f64> = (0..spec.n)
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            spec.signal(&row)
        })
        .collect();
    let response = add_noise(&signal, spec.snr.sigma2, &mut rng);
    Dataset::new(x, response, Some(signal), None)
}

/// Chained tree ensemble: `T_1 = T0_1(x)`, `T_j = T0_j(x) + rho * T_{j-1}`,
/// signal `sum beta_j T_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDgpSpec {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub c: f64,
    pub pi: f64,
    pub s: f64,
    /// `None` draws sparse `Unif(0, c)` coefficients.
    pub beta: Option<Vec<f64>>,
    /// Leaf cap of each base tree.
    pub base_leaves: usize,
    /// Rows used to estimate the signal variance.
    pub calibration_rows: usize,
}

impl TreeDgpSpec {
    pub fn new(n: usize, p: usize, s: f64) -> Self {
        TreeDgpSpec {
            n,
            p,
            rho: 0.5,
            c: 0.1,
            pi: 0.5,
            s,
            beta: None,
            base_leaves: 5,
            calibration_rows: 100_000,
        }
    }
}

/// Realized tree process: the base trees and coefficients are frozen, so
/// train and test draws share one signal function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeDgp {
    pub base_trees: Vec<RegressionTree>,
    pub beta: Vec<f64>,
    pub rho: f64,
    pub snr: SnrSpec,
}

impl TreeDgp {
    /// Fit `p` shallow base trees, the `j`-th to fresh standard normal noise
    /// on a fresh bootstrap of a standard normal design, then estimate the
    /// signal variance on an independent draw.
    pub fn build(spec: &TreeDgpSpec, stream: RngStream) -> Result<Self> {
        if spec.p < 1 || spec.n < 2 {
            return Err(Error::InvalidParameter("need n >= 2 and p >= 1".into()));
        }
        if !(0.0..1.0).contains(&spec.rho) {
            return Err(Error::InvalidParameter(format!("rho must lie in [0, 1), got {}", spec.rho)));
        }
        let beta = match &spec.beta {
            Some(b) if b.len() != spec.p => {
                return Err(Error::DimensionMismatch {
                    expected: spec.p,
                    got: b.len(),
                })
            }
            Some(b) if b.iter().all(|&v| v == 0.0) => return Err(Error::ZeroSignal),
            Some(b) => b.clone(),
            None => {
                let mut rng = stream.child(0).rng();
                let mut drawn = None;
                for _ in 0..MAX_REDRAWS {
                    let b: Vec<f64> = (0..spec.p).map(|_| sparse_uniform(spec.c, spec.pi, &mut rng)).collect();
                    if b.iter().any(|&v| v != 0.0) {
                        drawn = Some(b);
                        break;
                    }
                }
                drawn.ok_or(Error::ZeroSignal)?
            }
        };

        let mut rng = stream.child(1).rng();
        let x = gaussian_matrix(spec.n, spec.p, &mut rng);
        let params = TreeParams {
            mtry: Some(spec.p),
            min_node_size: 5,
            max_leaf_nodes: Some(spec.base_leaves),
        };
        let base_trees = (0..spec.p)
            .map(|j| {
                let tree_stream = stream.child(2).child(j as u64);
                let mut noise_rng = tree_stream.child(0).rng();
                let y0: Vec<f64> = (0..spec.n).map(|_| noise_rng.sample(StandardNormal)).collect();
                let data = Dataset::new(x.clone(), y0, None, None)?;
                let bag = bootstrap_sample(spec.n, tree_stream.child(1));
                fit_tree(&data, &bag, &params, tree_stream.child(2))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut dgp = TreeDgp {
            base_trees,
            beta,
            rho: spec.rho,
            snr: SnrSpec {
                phi: 0.0,
                s: spec.s,
                sigma2: 0.0,
            },
        };
        let mut eval_rng = stream.child(3).rng();
        let eval = gaussian_matrix(spec.calibration_rows.max(2), spec.p, &mut eval_rng);
        let signal = dgp.signal_rows(&eval);
        let phi = crate::data::sample_sd(&signal).powi(2);
        if !(phi > 0.0) {
            return Err(Error::ZeroSignal);
        }
        dgp.snr = SnrSpec::new(phi, spec.s)?;
        Ok(dgp)
    }

    pub fn with_snr(&self, s: f64) -> Result<Self> {
        Ok(TreeDgp {
            snr: SnrSpec::new(self.snr.phi, s)?,
            ..self.clone()
        })
    }

    /// Chained columns `T_1 .. T_p` at every row of `x`.
    pub fn chained_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, p) = (x.nrows(), self.base_trees.len());
        let mut t = DMatrix::zeros(n, p);
        for i in 0..n {
            let mut prev = 0.0;
            for j in 0..p {
                let base = self.base_trees[j].predict_unchecked(|f| x[(i, f)]);
                let v = if j == 0 { base } else { base + self.rho * prev };
                t[(i, j)] = v;
                prev = v;
            }
        }
        t
    }

    pub fn signal_rows(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let t = self.chained_columns(x);
        (0..x.nrows())
            .map(|i| (0..t.ncols()).map(|j| self.beta[j] * t[(i, j)]).sum())
            .collect()
    }

    pub fn sample(&self, n: usize, stream: RngStream) -> Result<Dataset> {
        let mut rng = stream.rng();
        let p = self.base_trees.len();
        let x = gaussian_matrix(n, p, &mut rng);
        let signal = self.signal_rows(&x);
        let response = add_noise(&signal, self.snr.sigma2, &mut rng);
        Dataset::new(x, response, Some(signal), None)
    }
}

pub fn gen_tree_ensemble(spec: &TreeDgpSpec, stream: RngStream) -> Result<Dataset> {
    TreeDgp::build(spec, stream.child(0))?.sample(spec.n, stream.child(1))
}
