//! Monte Carlo replications of the ensemble's headline behaviour on the
//! polynomial design.

use rayon::prelude::*;

use lassoed_forest::data::standardize_response;
use lassoed_forest::ensemble::{split_rows, variable_importance, FitConfig, ImportanceWeights, SelectionStage};
use lassoed_forest::experiments::{DgpConfig, Realized};
use lassoed_forest::forest::{fit_forest, prediction_matrix, RowOrigin};
use lassoed_forest::lasso::{assign_folds, coordinate_descent, lambda_path, LassoProblem, PathSettings};
use lassoed_forest::{derive_stream, RngStream};

fn poly_dgp(seed: u64) -> Realized {
    DgpConfig::Polynomial {
        n: 400,
        p: 50,
        c: 0.1,
        pi: 0.5,
    }
    .realize(RngStream::new(seed, 0))
    .unwrap()
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

#[test]
fn post_selection_beats_vanilla_at_high_snr() {
    let wins: Vec<bool> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let dgp = poly_dgp(1000 + seed).with_snr(8.0).unwrap();
            let train = dgp.sample(400, RngStream::new(seed, 1)).unwrap();
            let test = dgp.sample(1000, RngStream::new(seed, 2)).unwrap();
            let cfg = FitConfig {
                n_trees: 100,
                theta_grid: vec![0.0, 1.0],
                seed,
                ..FitConfig::default()
            };
            let stage = SelectionStage::fit(&train, &cfg).unwrap();
            let vanilla = stage.model_at(0.0).unwrap().predict_rows(test.features()).unwrap();
            let post = stage.model_at(1.0).unwrap().predict_rows(test.features()).unwrap();
            mse(&post, test.response()) < mse(&vanilla, test.response())
        })
        .collect();
    let rate = wins.iter().filter(|w| **w).count() as f64 / wins.len() as f64;
    println!("post-selection wins in {rate} of seeds");
    assert!(rate >= 0.7, "win rate {rate}");
}

/// Cross-validated error of one blend weight, recomputed with cold-start
/// fits on every fold and every lambda.
fn recomputed_error(trees: &nalgebra::DMatrix<f64>, target: &[f64], base: &[f64], folds: &[usize], k: usize, theta: f64, path: PathSettings) -> f64 {
    if theta == 0.0 {
        let errs: Vec<f64> = (0..k)
            .map(|f| {
                let rows: Vec<usize> = (0..target.len()).filter(|&i| folds[i] == f).collect();
                rows.iter().map(|&i| (target[i] - base[i]).powi(2)).sum::<f64>() / rows.len() as f64
            })
            .collect();
        return errs.iter().sum::<f64>() / k as f64;
    }
    let problem = LassoProblem::blended(trees, target, base, theta, true).unwrap();
    let lambdas = lambda_path(&problem, path.n_lambda, path.ratio).unwrap();
    let per_lambda: Vec<f64> = lambdas
        .par_iter()
        .map(|&lam| {
            let errs: Vec<f64> = (0..k)
                .map(|f| {
                    let train: Vec<usize> = (0..target.len()).filter(|&i| folds[i] != f).collect();
                    let held: Vec<usize> = (0..target.len()).filter(|&i| folds[i] == f).collect();
                    let sol = coordinate_descent(&problem.subset_rows(&train).unwrap(), lam, &Default::default()).unwrap();
                    let fit = problem.subset_rows(&held).unwrap().fitted(&sol);
                    held.iter().zip(&fit).map(|(&i, p)| (target[i] - p).powi(2)).sum::<f64>() / held.len() as f64
                })
                .collect();
            errs.iter().sum::<f64>() / k as f64
        })
        .collect();
    per_lambda.iter().copied().fold(f64::INFINITY, f64::min)
}

#[test]
fn selected_theta_is_recomputed_argmin() {
    let dgp = poly_dgp(77).with_snr(2.0).unwrap();
    let data = dgp.sample(400, RngStream::new(77, 1)).unwrap();
    let path = PathSettings {
        n_lambda: 20,
        ratio: 1e-2,
    };
    let cfg = FitConfig {
        n_trees: 200,
        seed: 5,
        path,
        ..FitConfig::default()
    };
    let model = SelectionStage::fit(&data, &cfg).unwrap().select().unwrap();

    // independent reconstruction of the second stage
    let (work, _) = standardize_response(&data).unwrap();
    let (first, second) = split_rows(400, 0.5, derive_stream(cfg.seed, 0)).unwrap();
    let forest = fit_forest(&work.subset(&first).unwrap(), cfg.n_trees, &cfg.tree, derive_stream(cfg.seed, 1)).unwrap();
    let d2 = work.subset(&second).unwrap();
    let m = prediction_matrix(&forest, d2.features(), RowOrigin::HeldOut).unwrap();
    let base = m.row_means();
    let folds = assign_folds(d2.n_rows(), cfg.cv_folds, derive_stream(cfg.seed, 2)).unwrap();
    let errors: Vec<f64> = cfg
        .theta_grid
        .iter()
        .map(|&t| recomputed_error(&m.values, d2.response(), &base, &folds, cfg.cv_folds, t, path))
        .collect();
    let mut best = 0;
    for (i, e) in errors.iter().enumerate() {
        if *e < errors[best] {
            best = i;
        }
    }
    println!("recomputed {errors:?}, selected {}", model.theta_hat);
    assert_eq!(model.theta_hat, cfg.theta_grid[best]);
    for (point, e) in model.cv_curve.iter().zip(&errors) {
        assert!((point.error - e).abs() <= 1e-4 * e.max(1.0), "{point:?} vs {e}");
    }
}

#[test]
fn post_selection_importance_favours_support() {
    let dgp = DgpConfig::FixedSupport {
        n: 400,
        p: 50,
        support: 5,
        coefficient: 0.1,
    }
    .realize(RngStream::new(3, 0))
    .unwrap()
    .with_snr(8.0)
    .unwrap();
    let wins: Vec<bool> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let train = dgp.sample(400, RngStream::new(seed, 1)).unwrap();
            let cfg = FitConfig {
                n_trees: 100,
                theta_grid: vec![0.0, 1.0],
                seed,
                ..FitConfig::default()
            };
            let stage = SelectionStage::fit(&train, &cfg).unwrap();
            let score = |theta: f64| {
                let model = stage.model_at(theta).unwrap();
                variable_importance(&model, ImportanceWeights::Signed)
                    .map(|v| v.kappa[..5].iter().sum::<f64>())
                    .unwrap_or(f64::NEG_INFINITY)
            };
            score(1.0) > score(0.0)
        })
        .collect();
    let rate = wins.iter().filter(|w| **w).count() as f64 / wins.len() as f64;
    println!("post-selection importance wins in {rate} of seeds");
    assert!(rate >= 0.6, "win rate {rate}");
}
