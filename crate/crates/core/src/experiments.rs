//! Simulation studies comparing the vanilla, post-selection and Lassoed
//! forests: SNR sweeps, bias-variance decompositions, error-estimate
//! accuracy and importance recovery.
//!
//! All four share one engine. Per replication a training and a test set are
//! drawn once and reused across the SNR grid with rescaled noise; each
//! (replication, SNR) cell fits a single [`SelectionStage`] from which the
//! three methods are read off (`theta = 0`, `theta = 1`, selected `theta`).

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{mean, sample_sd, Dataset};
use crate::ensemble::{variable_importance, FitConfig, ImportanceWeights, LassoedModel, SelectionStage};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::simgen::{gen_polynomial, PairCoefficient, PolyDgpSpec, TreeDgp, TreeDgpSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    PostSelection,
    Lassoed,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vanilla, Method::PostSelection, Method::Lassoed];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::PostSelection => "post_selection",
            Method::Lassoed => "lassoed",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Data-generating process of a study. `n` is the training size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DgpConfig {
    /// Sparse random quadratic polynomial.
    Polynomial {
        n: usize,
        p: usize,
        #[serde(default = "default_c")]
        c: f64,
        #[serde(default = "default_pi")]
        pi: f64,
    },
    /// Quadratic polynomial whose first `support` features carry identical
    /// main effects and pairwise interactions equal to `coefficient`.
    FixedSupport {
        n: usize,
        p: usize,
        #[serde(default = "default_support")]
        support: usize,
        #[serde(default = "default_c")]
        coefficient: f64,
    },
    /// Chained tree ensemble.
    Tree {
        n: usize,
        p: usize,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_c")]
        c: f64,
        #[serde(default = "default_pi")]
        pi: f64,
        #[serde(default = "default_base_leaves")]
        base_leaves: usize,
        #[serde(default = "default_calibration_rows")]
        calibration_rows: usize,
    },
}

fn default_c() -> f64 {
    0.1
}
fn default_pi() -> f64 {
    0.5
}
fn default_support() -> usize {
    5
}
fn default_rho() -> f64 {
    0.5
}
fn default_base_leaves() -> usize {
    5
}
fn default_calibration_rows() -> usize {
    100_000
}

impl DgpConfig {
    pub fn n(&self) -> usize {
        match *self {
            DgpConfig::Polynomial { n, .. } | DgpConfig::FixedSupport { n, .. } | DgpConfig::Tree { n, .. } => n,
        }
    }

    pub fn p(&self) -> usize {
        match *self {
            DgpConfig::Polynomial { p, .. } | DgpConfig::FixedSupport { p, .. } | DgpConfig::Tree { p, .. } => p,
        }
    }

    /// Freeze the signal function. The SNR is a placeholder until
    /// [`Realized::with_snr`].
    pub fn realize(&self, stream: RngStream) -> Result<Realized> {
        Ok(match *self {
            DgpConfig::Polynomial { n, p, c, pi } => Realized::Poly(PolyDgpSpec::draw(n, p, c, pi, 1.0, stream)?),
            DgpConfig::FixedSupport {
                n,
                p,
                support,
                coefficient,
            } => {
                if support < 1 || support > p {
                    return Err(Error::Config(format!("support must lie in 1..={p}")));
                }
                let mut alpha = vec![0.0; p];
                alpha[..support].iter_mut().for_each(|a| *a = coefficient);
                let beta = (0..support)
                    .flat_map(|j| ((j + 1)..support).map(move |k| PairCoefficient { j, k, value: coefficient }))
                    .collect();
                Realized::Poly(PolyDgpSpec::fixed(n, p, alpha, beta, 1.0)?)
            }
            DgpConfig::Tree {
                n,
                p,
                rho,
                c,
                pi,
                base_leaves,
                calibration_rows,
            } => {
                let spec = TreeDgpSpec {
                    rho,
                    c,
                    pi,
                    base_leaves,
                    calibration_rows,
                    ..TreeDgpSpec::new(n, p, 1.0)
                };
                Realized::Tree(TreeDgp::build(&spec, stream)?)
            }
        })
    }
}

/// A data-generating process with its signal fixed.
#[derive(Debug, Clone)]
pub enum Realized {
    Poly(PolyDgpSpec),
    Tree(TreeDgp),
}

impl Realized {
    pub fn phi(&self) -> f64 {
        match self {
            Realized::Poly(s) => s.snr.phi,
            Realized::Tree(t) => t.snr.phi,
        }
    }

    pub fn with_snr(&self, s: f64) -> Result<Realized> {
        Ok(match self {
            Realized::Poly(spec) => Realized::Poly(spec.with_snr(s)?),
            Realized::Tree(t) => Realized::Tree(t.with_snr(s)?),
        })
    }

    /// `n` rows with stored signal. For a fixed stream, features and
    /// standardized noise do not depend on the SNR.
    pub fn sample(&self, n: usize, stream: RngStream) -> Result<Dataset> {
        match self {
            Realized::Poly(spec) => gen_polynomial(&spec.with_n(n), stream),
            Realized::Tree(t) => t.sample(n, stream),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub dgp: DgpConfig,
    pub snr_grid: Vec<f64>,
    pub replications: usize,
    #[serde(default)]
    pub fit: FitConfig,
    pub test_size: usize,
    #[serde(default)]
    pub importance_weights: ImportanceWeights,
}

impl SweepConfig {
    /// Reduced-size polynomial study: `n = 400`, `p = 50`, 100 trees.
    pub fn desk() -> Self {
        SweepConfig {
            dgp: DgpConfig::Polynomial {
                n: 400,
                p: 50,
                c: default_c(),
                pi: default_pi(),
            },
            snr_grid: vec![0.5, 2.0, 8.0],
            replications: 20,
            fit: FitConfig {
                n_trees: 100,
                ..FitConfig::default()
            },
            test_size: 1000,
            importance_weights: ImportanceWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        if self.snr_grid.is_empty() || self.snr_grid.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("snr_grid must hold positive finite values".into()));
        }
        if self.snr_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("snr_grid must be strictly ascending".into()));
        }
        if self.replications < 2 {
            return Err(Error::Config("replications must be >= 2".into()));
        }
        if self.test_size < 2 {
            return Err(Error::Config("test_size must be >= 2".into()));
        }
        for t in [0.0, 1.0] {
            if !self.fit.theta_grid.contains(&t) {
                return Err(Error::Config(format!(
                    "theta_grid must contain {t}: the vanilla and post-selection forests are read off its endpoints"
                )));
            }
        }
        if self.dgp.p() < 1 || self.dgp.n() < 4 {
            return Err(Error::Config("dgp needs p >= 1 and n >= 4".into()));
        }
        Ok(())
    }
}

/// What a study keeps besides test errors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Collect {
    /// Predictions on one shared test set, for the decomposition.
    pub fixed_predictions: bool,
    pub importance: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: Method,
    /// Against the noisy test response.
    pub test_mse: f64,
    /// Against the stored test signal.
    pub signal_mse: f64,
    pub theta_hat: f64,
    /// Cross-validated error of the selected candidate, in response units.
    pub est_error: f64,
    pub fixed_predictions: Option<Vec<f64>>,
    pub kappa: Option<Vec<f64>>,
    /// Importance was requested but the model's weighted split counts
    /// vanish (every tree dropped), so `kappa` is undefined.
    pub importance_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub snr: f64,
    pub snr_index: usize,
    pub rep: usize,
    pub sigma2: f64,
    pub methods: Vec<MethodOutcome>,
}

impl CellOutcome {
    pub fn method(&self, m: Method) -> &MethodOutcome {
        self.methods.iter().find(|o| o.method == m).expect("every method is fitted")
    }
}

/// Raw per-cell results, ordered by SNR and then replication.
#[derive(Debug, Clone)]
pub struct Study {
    pub config: SweepConfig,
    pub phi: f64,
    pub cells: Vec<CellOutcome>,
    /// Stored signal of the shared test set, when collected.
    pub fixed_signal: Option<Vec<f64>>,
}

const DGP_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const FIT_STREAM: u64 = 3;
const FIXED_TEST_STREAM: u64 = 4;

fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64
}

fn model_error(model: &LassoedModel, scale: f64) -> f64 {
    let theta = model.theta_hat;
    let point = model
        .cv_curve
        .iter()
        .find(|c| c.theta == theta)
        .expect("the curve holds the selected theta");
    point.error * scale * scale
}

/// Fit every (SNR, replication) cell. Cells run in parallel on their own
/// streams and are returned in grid order.
pub fn run_study(cfg: &SweepConfig, stream: RngStream, collect: Collect) -> Result<Study> {
    cfg.validate()?;
    let base = cfg.dgp.realize(stream.child(DGP_STREAM))?;
    let phi = base.phi();
    let fixed = if collect.fixed_predictions {
        Some(base.sample(cfg.test_size, stream.child(FIXED_TEST_STREAM))?)
    } else {
        None
    };
    let dgps = cfg
        .snr_grid
        .iter()
        .map(|&s| base.with_snr(s))
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.dgp.n();
    let reps = cfg.replications;
    let cells = (0..cfg.snr_grid.len() * reps)
        .into_par_iter()
        .map(|flat| -> Result<CellOutcome> {
            let (si, rep) = (flat / reps, flat % reps);
            let dgp = &dgps[si];
            let r = rep as u64;
            let train = dgp.sample(n, stream.child(TRAIN_STREAM).child(r))?;
            let test = dgp.sample(cfg.test_size, stream.child(TEST_STREAM).child(r))?;
            let fit = FitConfig {
                seed: stream.child(FIT_STREAM).child(r).rng().gen(),
                ..cfg.fit.clone()
            };
            let stage = SelectionStage::fit(&train, &fit)?;
            let scale = stage.transform().scale;
            let models = [stage.model_at(0.0)?, stage.model_at(1.0)?, stage.select()?];
            let test_signal = test.signal().expect("simulated data store the signal");
            let methods = Method::ALL
                .iter()
                .zip(&models)
                .map(|(&method, model)| -> Result<MethodOutcome> {
                    let pred = model.predict_rows(test.features())?;
                    let fixed_predictions = match &fixed {
                        Some(f) => Some(model.predict_rows(f.features())?),
                        None => None,
                    };
                    let (kappa, importance_degenerate) = if collect.importance {
                        match variable_importance(model, cfg.importance_weights) {
                            Ok(v) => (Some(v.kappa), false),
                            Err(Error::DegenerateImportance(_)) => (None, true),
                            Err(e) => return Err(e),
                        }
                    } else {
                        (None, false)
                    };
                    Ok(MethodOutcome {
                        method,
                        test_mse: mse(&pred, test.response()),
                        signal_mse: mse(&pred, test_signal),
                        theta_hat: model.theta_hat,
                        est_error: model_error(model, scale),
                        fixed_predictions,
                        kappa,
                        importance_degenerate,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CellOutcome {
                snr: cfg.snr_grid[si],
                snr_index: si,
                rep,
                sigma2: phi / cfg.snr_grid[si],
                methods,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Study {
        config: cfg.clone(),
        phi,
        cells,
        fixed_signal: fixed.map(|f| f.signal().expect("simulated data store the signal").to_vec()),
    })
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    let se = if v.len() > 1 {
        sample_sd(v) / (v.len() as f64).sqrt()
    } else {
        f64::NAN
    };
    (m, se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub snr: f64,
    pub method: Method,
    pub rep: usize,
    pub test_mse: f64,
    pub theta_hat: f64,
    pub est_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub snr: f64,
    pub method: Method,
    pub mean_mse: f64,
    pub se_mse: f64,
    pub mean_theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub records: Vec<SweepRecord>,
    pub summary: Vec<SweepSummary>,
    /// Per SNR, the share of replications where the Lassoed error is within
    /// 10% of the better benchmark.
    pub lassoed_admissible_rate: Vec<(f64, f64)>,
}

impl SweepReport {
    pub fn mean_mse(&self, snr: f64, method: Method) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.snr == snr && s.method == method)
            .map(|s| s.mean_mse)
    }
}

fn cells_at(study: &Study, si: usize) -> impl Iterator<Item = &CellOutcome> {
    study.cells.iter().filter(move |c| c.snr_index == si)
}

impl Study {
    pub fn sweep_report(&self) -> SweepReport {
        let mut records = Vec::with_capacity(self.cells.len() * 3);
        for cell in &self.cells {
            for o in &cell.methods {
                records.push(SweepRecord {
                    snr: cell.snr,
                    method: o.method,
                    rep: cell.rep,
                    test_mse: o.test_mse,
                    theta_hat: o.theta_hat,
                    est_error: o.est_error,
                });
            }
        }
        let mut summary = Vec::new();
        let mut admissible = Vec::new();
        for (si, &snr) in self.config.snr_grid.iter().enumerate() {
            for m in Method::ALL {
                let errs: Vec<f64> = cells_at(self, si).map(|c| c.method(m).test_mse).collect();
                let thetas: Vec<f64> = cells_at(self, si).map(|c| c.method(m).theta_hat).collect();
                let (mean_mse, se_mse) = mean_se(&errs);
                summary.push(SweepSummary {
                    snr,
                    method: m,
                    mean_mse,
                    se_mse,
                    mean_theta: mean(&thetas),
                });
            }
            let flags: Vec<f64> = cells_at(self, si)
                .map(|c| {
                    let best = c.method(Method::Vanilla).test_mse.min(c.method(Method::PostSelection).test_mse);
                    if c.method(Method::Lassoed).test_mse <= 1.1 * best {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            admissible.push((snr, mean(&flags)));
        }
        SweepReport {
            records,
            summary,
            lassoed_admissible_rate: admissible,
        }
    }

    pub fn decomposition_report(&self) -> Result<DecompositionReport> {
        let signal = self
            .fixed_signal
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("study did not keep shared-test-set predictions".into()))?;
        let mut cells = Vec::new();
        for (si, &snr) in self.config.snr_grid.iter().enumerate() {
            let sigma2 = self.phi / snr;
            for m in Method::ALL {
                let preds: Vec<Vec<f64>> = cells_at(self, si)
                    .map(|c| c.method(m).fixed_predictions.clone().expect("collected"))
                    .collect();
                let direct: Vec<f64> = cells_at(self, si).map(|c| c.method(m).signal_mse).collect();
                let noisy: Vec<f64> = cells_at(self, si).map(|c| c.method(m).test_mse).collect();
                let bv = decompose(&preds, signal)?;
                let (mse_vs_signal, se_direct) = mean_se(&direct);
                let se = (se_direct.powi(2) + bv.se.powi(2)).sqrt();
                cells.push(DecompositionCell {
                    snr,
                    method: m,
                    bias2: bv.bias2,
                    variance: bv.variance,
                    noise: sigma2,
                    total: bv.bias2 + bv.variance + sigma2,
                    mse_vs_signal,
                    mse_vs_noisy: mean(&noisy),
                    gap: bv.bias2 + bv.variance - mse_vs_signal,
                    se,
                });
            }
        }
        Ok(DecompositionReport { cells })
    }

    pub fn error_accuracy_report(&self) -> ErrorAccuracyReport {
        let mut records = Vec::new();
        let mut agreement = Vec::new();
        for (si, &snr) in self.config.snr_grid.iter().enumerate() {
            let mut pairs = Vec::new();
            for c in cells_at(self, si) {
                let (v, p) = (c.method(Method::Vanilla), c.method(Method::PostSelection));
                for o in [v, p] {
                    records.push(ErrorRecord {
                        true_err: o.test_mse,
                        est_err: o.est_error,
                        method: o.method,
                        snr,
                        rep: c.rep,
                    });
                }
                pairs.push((p.est_error - v.est_error, p.test_mse - v.test_mse));
            }
            agreement.push(SignAgreement {
                snr,
                rate: sign_agreement(&pairs),
                replications: pairs.len(),
            });
        }
        ErrorAccuracyReport { records, agreement }
    }

    pub fn importance_report(&self) -> Result<ImportanceReport> {
        let support = match self.config.dgp {
            DgpConfig::FixedSupport { support, .. } => support,
            _ => {
                return Err(Error::Config(
                    "importance recovery needs the fixed_support data-generating process".into(),
                ))
            }
        };
        let mut records = Vec::new();
        let mut summary = Vec::new();
        for (si, &snr) in self.config.snr_grid.iter().enumerate() {
            for m in Method::ALL {
                let mut scores = Vec::new();
                let mut degenerate = 0;
                for c in cells_at(self, si) {
                    let o = c.method(m);
                    if o.importance_degenerate {
                        degenerate += 1;
                        records.push(ImportanceRecord {
                            snr,
                            method: m,
                            rep: c.rep,
                            recovery: None,
                            kappa_sum: None,
                            has_negative: false,
                            kappa: Vec::new(),
                        });
                        continue;
                    }
                    let kappa = o.kappa.as_ref().ok_or_else(|| {
                        Error::InvalidParameter("study did not keep importance vectors".into())
                    })?;
                    let score = recovery_score(kappa, support);
                    scores.push(score);
                    records.push(ImportanceRecord {
                        snr,
                        method: m,
                        rep: c.rep,
                        recovery: Some(score),
                        kappa_sum: Some(kappa.iter().sum()),
                        has_negative: kappa.iter().any(|&k| k < 0.0),
                        kappa: kappa.clone(),
                    });
                }
                let (mean_recovery, se_recovery) = if scores.is_empty() {
                    (None, None)
                } else {
                    let (m, se) = mean_se(&scores);
                    (Some(m), se.is_finite().then_some(se))
                };
                summary.push(ImportanceSummary {
                    snr,
                    method: m,
                    mean_recovery,
                    se_recovery,
                    degenerate,
                });
            }
        }
        Ok(ImportanceReport {
            support,
            records,
            summary,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasVariance {
    /// Squared bias with the finite-replication correction, so that
    /// `bias2 + variance` equals the mean squared error on the shared set.
    pub bias2: f64,
    pub variance: f64,
    pub mse: f64,
    /// Standard error of `mse` over test points.
    pub se: f64,
}

/// Decompose `preds[r][i]` (replication `r`, test point `i`) around the
/// signal, averaging over test points.
pub fn decompose(preds: &[Vec<f64>], signal: &[f64]) -> Result<BiasVariance> {
    let r = preds.len();
    if r < 2 {
        return Err(Error::TooFewRows { needed: 2, got: r });
    }
    let m = signal.len();
    if preds.iter().any(|p| p.len() != m) {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: preds.iter().map(|p| p.len()).find(|&l| l != m).unwrap_or(0),
        });
    }
    let rf = r as f64;
    let (mut bias2, mut variance) = (0.0, 0.0);
    let mut point_mse = Vec::with_capacity(m);
    for (i, g) in signal.iter().enumerate() {
        let col: Vec<f64> = preds.iter().map(|p| p[i]).collect();
        let avg = mean(&col);
        let var = col.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (rf - 1.0);
        bias2 += (avg - g).powi(2) - var / rf;
        variance += var;
        point_mse.push(col.iter().map(|v| (v - g).powi(2)).sum::<f64>() / rf);
    }
    let (mse, se) = mean_se(&point_mse);
    Ok(BiasVariance {
        bias2: bias2 / m as f64,
        variance: variance / m as f64,
        mse,
        se: if m > 1 { se } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCell {
    pub snr: f64,
    pub method: Method,
    pub bias2: f64,
    pub variance: f64,
    pub noise: f64,
    pub total: f64,
    /// Directly measured on each replication's own test set.
    pub mse_vs_signal: f64,
    pub mse_vs_noisy: f64,
    /// `bias2 + variance - mse_vs_signal`.
    pub gap: f64,
    /// Monte Carlo standard error of `gap`.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub cells: Vec<DecompositionCell>,
}

impl DecompositionReport {
    pub fn cell(&self, snr: f64, method: Method) -> Option<&DecompositionCell> {
        self.cells.iter().find(|c| c.snr == snr && c.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub true_err: f64,
    pub est_err: f64,
    pub method: Method,
    pub snr: f64,
    pub rep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignAgreement {
    pub snr: f64,
    pub rate: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorAccuracyReport {
    pub records: Vec<ErrorRecord>,
    pub agreement: Vec<SignAgreement>,
}

/// Share of `(estimated, true)` differences with the same sign; an exact
/// zero only agrees with an exact zero.
pub fn sign_agreement(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    let hits = pairs.iter().filter(|(e, t)| e.signum() == t.signum() && (*e == 0.0) == (*t == 0.0)).count();
    hits as f64 / pairs.len() as f64
}

/// Importance mass on the first `support` features.
pub fn recovery_score(kappa: &[f64], support: usize) -> f64 {
    kappa.iter().take(support).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub snr: f64,
    pub method: Method,
    pub rep: usize,
    /// `None` when the importance is degenerate.
    pub recovery: Option<f64>,
    pub kappa_sum: Option<f64>,
    pub has_negative: bool,
    pub kappa: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    pub snr: f64,
    pub method: Method,
    /// Over replications with a defined importance.
    pub mean_recovery: Option<f64>,
    pub se_recovery: Option<f64>,
    /// Replications whose weighted split counts vanished.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub support: usize,
    pub records: Vec<ImportanceRecord>,
    pub summary: Vec<ImportanceSummary>,
}

impl ImportanceReport {
    pub fn mean_recovery(&self, snr: f64, method: Method) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.snr == snr && s.method == method)
            .and_then(|s| s.mean_recovery)
    }
}

pub fn snr_sweep(cfg: &SweepConfig, stream: RngStream) -> Result<SweepReport> {
    Ok(run_study(cfg, stream, Collect::default())?.sweep_report())
}

pub fn bias_variance_decomposition(cfg: &SweepConfig, stream: RngStream) -> Result<DecompositionReport> {
    if cfg.replications < 10 {
        return Err(Error::Config("the decomposition needs at least 10 replications".into()));
    }
    let collect = Collect {
        fixed_predictions: true,
        importance: false,
    };
    run_study(cfg, stream, collect)?.decomposition_report()
}

pub fn error_estimate_accuracy(cfg: &SweepConfig, stream: RngStream) -> Result<ErrorAccuracyReport> {
    Ok(run_study(cfg, stream, Collect::default())?.error_accuracy_report())
}

pub fn importance_recovery(cfg: &SweepConfig, stream: RngStream) -> Result<ImportanceReport> {
    if !matches!(cfg.dgp, DgpConfig::FixedSupport { .. }) {
        return Err(Error::Config(
            "importance recovery needs the fixed_support data-generating process".into(),
        ));
    }
    let collect = Collect {
        fixed_predictions: false,
        importance: true,
    };
    run_study(cfg, stream, collect)?.importance_report()
}

/// Hex SHA-256 of the config's canonical JSON form.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let canonical = serde_json::to_string(config)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Identifies the config, seed and code version behind an output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new<T: Serialize>(config: &T, seed: u64) -> Result<Self> {
        Ok(Provenance {
            config_hash: config_hash(config)?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }

    /// `<kind>-<first 12 hash digits>-seed<seed>`.
    pub fn file_stem(&self, kind: &str) -> String {
        format!("{kind}-{}-seed{}", &self.config_hash[..12], self.seed)
    }

    /// `#`-prefixed header lines for text outputs.
    pub fn header_lines(&self) -> String {
        format!(
            "# config_hash: {}\n# seed: {}\n# version: {}\n",
            self.config_hash, self.seed, self.version
        )
    }
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    provenance: &'a Provenance,
    report: &'a T,
}

/// Report rendered to JSON and CSV text, ready to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub json: String,
    pub csv: String,
}

/// Render `report` as pretty JSON with provenance and `rows` as CSV with a
/// provenance header.
pub fn render<T: Serialize, R: Serialize>(provenance: &Provenance, report: &T, rows: &[R]) -> Result<RenderedReport> {
    let mut json = serde_json::to_string_pretty(&Envelope { provenance, report })?;
    json.push('\n');
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::InvalidData(format!("csv rendering failed: {e}")))?;
    }
    let body = writer
        .into_inner()
        .map_err(|e| Error::InvalidData(format!("csv rendering failed: {e}")))?;
    let mut csv = provenance.header_lines();
    csv.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    Ok(RenderedReport { json, csv })
}

/// Write `<stem>.json` and `<stem>.csv` under `dir`, returning their paths.
pub fn write_rendered(dir: &Path, stem: &str, rendered: &RenderedReport) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let csv_path = dir.join(format!("{stem}.csv"));
    for (path, text) in [(&json_path, &rendered.json), (&csv_path, &rendered.csv)] {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok((json_path, csv_path))
}

/// Flat CSV row of a sweep.
#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub snr: f64,
    pub method: Method,
    pub rep: usize,
    pub test_mse: f64,
    pub theta_hat: f64,
    pub est_error: f64,
}

impl SweepReport {
    pub fn rows(&self) -> Vec<SweepRow> {
        self.records
            .iter()
            .map(|r| SweepRow {
                snr: r.snr,
                method: r.method,
                rep: r.rep,
                test_mse: r.test_mse,
                theta_hat: r.theta_hat,
                est_error: r.est_error,
            })
            .collect()
    }
}

/// Flat CSV row of an importance study; `kappa` joined with `;`.
#[derive(Debug, Serialize)]
pub struct ImportanceRow {
    pub snr: f64,
    pub method: Method,
    pub rep: usize,
    pub recovery: Option<f64>,
    pub kappa_sum: Option<f64>,
    pub kappa: String,
}

impl ImportanceReport {
    pub fn rows(&self) -> Vec<ImportanceRow> {
        self.records
            .iter()
            .map(|r| ImportanceRow {
                snr: r.snr,
                method: r.method,
                rep: r.rep,
                recovery: r.recovery,
                kappa_sum: r.kappa_sum,
                kappa: r.kappa.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";"),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
