use super::*;

fn tiny(dgp: DgpConfig, snr_grid: Vec<f64>, replications: usize) -> SweepConfig {
    SweepConfig {
        dgp,
        snr_grid,
        replications,
        fit: FitConfig {
            n_trees: 10,
            theta_grid: vec![0.0, 0.5, 1.0],
            cv_folds: 3,
            path: crate::lasso::PathSettings {
                n_lambda: 10,
                ratio: 1e-3,
            },
            ..FitConfig::default()
        },
        test_size: 50,
        importance_weights: ImportanceWeights::Absolute,
    }
}

fn poly(n: usize, p: usize) -> DgpConfig {
    DgpConfig::Polynomial { n, p, c: 1.0, pi: 0.5 }
}

#[test]
fn sweep_bookkeeping() {
    let cfg = tiny(poly(60, 4), vec![2.0], 2);
    let report = snr_sweep(&cfg, RngStream::new(1, 0)).unwrap();
    assert_eq!(report.records.len(), 6);
    assert_eq!(report.summary.len(), 3);
    assert_eq!(report.rows().len(), 6);
    assert!(report.records.iter().all(|r| r.test_mse.is_finite() && r.est_error.is_finite()));
    let vanilla = report.records.iter().find(|r| r.method == Method::Vanilla).unwrap();
    assert_eq!(vanilla.theta_hat, 0.0);
    let post = report.records.iter().find(|r| r.method == Method::PostSelection).unwrap();
    assert_eq!(post.theta_hat, 1.0);
}

#[test]
fn lassoed_estimate_is_the_curve_minimum() {
    let cfg = tiny(poly(60, 4), vec![1.0, 4.0], 2);
    let study = run_study(&cfg, RngStream::new(2, 0), Collect::default()).unwrap();
    for c in &study.cells {
        let l = c.method(Method::Lassoed).est_error;
        assert!(l <= c.method(Method::Vanilla).est_error + 1e-12);
        assert!(l <= c.method(Method::PostSelection).est_error + 1e-12);
    }
}

#[test]
fn common_noise_across_snr() {
    // features of a replication are shared across the grid
    let cfg = tiny(poly(40, 3), vec![1.0], 2);
    let base = cfg.dgp.realize(RngStream::new(3, 0)).unwrap();
    let a = base.with_snr(0.5).unwrap().sample(20, RngStream::new(9, 9)).unwrap();
    let b = base.with_snr(8.0).unwrap().sample(20, RngStream::new(9, 9)).unwrap();
    assert_eq!(a.features(), b.features());
    assert_eq!(a.signal(), b.signal());
    let ratio = (a.response()[0] - a.signal().unwrap()[0]) / (b.response()[0] - b.signal().unwrap()[0]);
    assert!((ratio - 4.0).abs() < 1e-9);
}

#[test]
fn decompose_constant_predictor() {
    let signal = vec![0.5, -1.0, 2.0, 0.0];
    let preds = vec![vec![1.5; 4]; 12];
    let bv = decompose(&preds, &signal).unwrap();
    assert_eq!(bv.variance, 0.0);
    let direct = signal.iter().map(|g| (1.5 - g).powi(2)).sum::<f64>() / 4.0;
    assert!((bv.bias2 - direct).abs() < 1e-12);
    assert!((bv.mse - direct).abs() < 1e-12);
}

#[test]
fn decompose_identity_is_exact() {
    let signal = vec![0.3, 1.0, -0.4];
    let preds: Vec<Vec<f64>> = (0..7)
        .map(|r| signal.iter().enumerate().map(|(i, g)| g + 0.1 * ((r * 3 + i) % 5) as f64 - 0.05).collect())
        .collect();
    let bv = decompose(&preds, &signal).unwrap();
    assert!((bv.bias2 + bv.variance - bv.mse).abs() < 1e-12);
    assert!(bv.variance > 0.0);
    assert!(decompose(&preds[..1], &signal).is_err());
}

#[test]
fn perfect_estimator_agrees() {
    let pairs: Vec<(f64, f64)> = [-2.0, 0.5, 1.0, -0.1].iter().map(|&d| (d, d)).collect();
    assert_eq!(sign_agreement(&pairs), 1.0);
    assert_eq!(sign_agreement(&[(1.0, -1.0), (1.0, 1.0)]), 0.5);
}

#[test]
fn full_support_recovers_everything() {
    let dgp = DgpConfig::FixedSupport {
        n: 60,
        p: 5,
        support: 5,
        coefficient: 1.0,
    };
    let report = importance_recovery(&tiny(dgp, vec![2.0], 2), RngStream::new(4, 0)).unwrap();
    let mut defined = 0;
    for r in report.records.iter().filter(|r| r.recovery.is_some()) {
        assert!((r.recovery.unwrap() - 1.0).abs() < 1e-9, "{r:?}");
        assert!((r.kappa_sum.unwrap() - 1.0).abs() < 1e-9);
        defined += 1;
    }
    // the vanilla forest always has a defined importance
    assert!(defined >= 2);
    let missing: usize = report.summary.iter().map(|s| s.degenerate).sum();
    assert_eq!(defined + missing, report.records.len());
}

#[test]
fn fixed_support_coefficients() {
    let dgp = DgpConfig::FixedSupport {
        n: 10,
        p: 8,
        support: 3,
        coefficient: 0.2,
    };
    match dgp.realize(RngStream::new(0, 0)).unwrap() {
        Realized::Poly(spec) => {
            assert_eq!(spec.alpha, vec![0.2, 0.2, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0]);
            let pairs: Vec<(usize, usize)> = spec.beta.iter().map(|b| (b.j, b.k)).collect();
            assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);
        }
        Realized::Tree(_) => unreachable!(),
    }
}

#[test]
fn importance_requires_fixed_support() {
    let cfg = tiny(poly(40, 3), vec![1.0], 2);
    assert!(matches!(importance_recovery(&cfg, RngStream::new(0, 0)), Err(Error::Config(_))));
}

#[test]
fn decomposition_needs_ten_replications() {
    let cfg = tiny(poly(40, 3), vec![1.0], 9);
    assert!(matches!(bias_variance_decomposition(&cfg, RngStream::new(0, 0)), Err(Error::Config(_))));
}

#[test]
fn decomposition_gap_is_small() {
    let cfg = tiny(poly(60, 3), vec![1.0, 8.0], 10);
    let report = bias_variance_decomposition(&cfg, RngStream::new(5, 0)).unwrap();
    assert_eq!(report.cells.len(), 6);
    for c in &report.cells {
        assert!(c.variance >= 0.0 && c.se > 0.0);
        assert!((c.total - c.bias2 - c.variance - c.noise).abs() < 1e-12);
        assert!(c.gap.abs() < 5.0 * c.se, "{c:?}");
    }
}

#[test]
fn config_validation() {
    let mut cfg = tiny(poly(40, 3), vec![1.0, 2.0], 2);
    cfg.validate().unwrap();
    cfg.snr_grid = vec![2.0, 1.0];
    assert!(cfg.validate().is_err());
    let mut cfg = tiny(poly(40, 3), vec![1.0], 2);
    cfg.fit.theta_grid = vec![0.5, 1.0];
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = tiny(poly(40, 3), vec![1.0], 1);
    assert!(cfg.validate().is_err());
    cfg.replications = 2;
    cfg.snr_grid = vec![-1.0];
    assert!(cfg.validate().is_err());
}

#[test]
fn toml_round_trip_and_unknown_keys() {
    let text = r#"
        snr_grid = [0.5, 2.0]
        replications = 3
        test_size = 100
        [dgp]
        kind = "tree"
        n = 100
        p = 10
        [fit]
        n_trees = 20
    "#;
    let cfg: SweepConfig = toml::from_str(text).unwrap();
    assert!(matches!(cfg.dgp, DgpConfig::Tree { rho, .. } if rho == 0.5));
    assert_eq!(cfg.fit.n_trees, 20);
    let bad = text.replace("test_size", "tset_size");
    assert!(toml::from_str::<SweepConfig>(&bad).is_err());
    let bad = text.replace("p = 10", "p = 10\nq = 1");
    assert!(toml::from_str::<SweepConfig>(&bad).is_err());
}

#[test]
fn error_accuracy_csv_columns() {
    let cfg = tiny(poly(60, 3), vec![4.0], 2);
    let report = error_estimate_accuracy(&cfg, RngStream::new(6, 0)).unwrap();
    assert_eq!(report.records.len(), 4);
    let prov = Provenance::new(&cfg, 6).unwrap();
    let rendered = render(&prov, &report, &report.records).unwrap();
    let header = rendered.csv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "true_err,est_err,method,snr,rep");
    assert!(rendered.csv.starts_with("# config_hash: "));
    assert!(rendered.json.contains("\"provenance\""));
}

#[test]
fn provenance_names() {
    let cfg = tiny(poly(60, 3), vec![4.0], 2);
    let a = Provenance::new(&cfg, 11).unwrap();
    assert_eq!(a, Provenance::new(&cfg.clone(), 11).unwrap());
    assert_eq!(a.config_hash.len(), 64);
    assert_eq!(a.file_stem("sweep"), format!("sweep-{}-seed11", &a.config_hash[..12]));
    let mut other = cfg.clone();
    other.test_size += 1;
    assert_ne!(Provenance::new(&other, 11).unwrap().config_hash, a.config_hash);
}

#[test]
fn worker_count_independent() {
    let cfg = tiny(poly(60, 4), vec![1.0, 4.0], 3);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let study = run_study(
                &cfg,
                RngStream::new(8, 0),
                Collect {
                    fixed_predictions: false,
                    importance: true,
                },
            )
            .unwrap();
            let prov = Provenance::new(&cfg, 8).unwrap();
            let sweep = study.sweep_report();
            render(&prov, &sweep, &sweep.rows()).unwrap()
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn tree_dgp_runs() {
    let dgp = DgpConfig::Tree {
        n: 60,
        p: 4,
        rho: 0.5,
        c: 1.0,
        pi: 1.0,
        base_leaves: 4,
        calibration_rows: 2000,
    };
    let report = snr_sweep(&tiny(dgp, vec![1.0], 2), RngStream::new(9, 0)).unwrap();
    assert_eq!(report.records.len(), 6);
}
