use super::*;
use crate::forest::{forest_mean_predict, tree_from_nodes, Node, RegressionTree, FOREST_FORMAT_VERSION};
use crate::rng::derive_stream;
use crate::simgen::{gen_polynomial, PolyDgpSpec};

fn poly_data(n: usize, p: usize, s: f64, seed: u64) -> Dataset {
    let spec = PolyDgpSpec::draw(n, p, 0.1, 0.5, s, derive_stream(seed, 100)).unwrap();
    gen_polynomial(&spec, derive_stream(seed, 101)).unwrap()
}

fn small_config(seed: u64) -> FitConfig {
    FitConfig {
        n_trees: 30,
        cv_folds: 5,
        path: PathSettings {
            n_lambda: 30,
            ratio: 1e-3,
        },
        seed,
        ..FitConfig::default()
    }
}

fn stump(feature: usize, threshold: f64, lo: f64, hi: f64, p: usize) -> RegressionTree {
    tree_from_nodes(
        vec![
            Node::Split {
                feature,
                threshold,
                left: 1,
                right: 2,
            },
            Node::Leaf { value: lo },
            Node::Leaf { value: hi },
        ],
        vec![0, 1],
        p,
    )
    .unwrap()
}

fn hand_model(trees: Vec<RegressionTree>, theta: f64, gamma0: f64, gamma: Vec<f64>) -> LassoedModel {
    let p = trees[0].n_features();
    LassoedModel {
        format_version: MODEL_FORMAT_VERSION,
        forest: Forest {
            format_version: FOREST_FORMAT_VERSION,
            trees,
            params: TreeParams::default(),
            seed: 0,
            n_train: 2,
            n_features: p,
        },
        theta_hat: theta,
        gamma0_hat: gamma0,
        gamma_hat: gamma,
        lambda_hat: 0.0,
        transform: ResponseTransform::identity(),
        cv_curve: vec![],
        split: RowSplit {
            forest_rows: vec![0],
            selection_rows: vec![1],
        },
    }
}

#[test]
fn halves_have_the_documented_sizes() {
    let (a, b) = split_halves(4, derive_stream(1, 0)).unwrap();
    assert_eq!((a.len(), b.len()), (2, 2));
    let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
    all.sort_unstable();
    assert_eq!(all, vec![0, 1, 2, 3]);
    let (a, b) = split_halves(5, derive_stream(1, 0)).unwrap();
    assert_eq!((a.len(), b.len()), (3, 2));
    assert!(matches!(split_halves(3, derive_stream(1, 0)), Err(Error::TooFewRows { .. })));
}

#[test]
fn halves_are_uniform_over_seeds() {
    // each count is Binomial(100, 1/2) with sd 0.05 in frequency; the band
    // is 4 sd so that 400 rows pass together, and the spread of the counts
    // must look binomial
    let mut hits = vec![0usize; 400];
    for seed in 0..100 {
        let (a, _) = split_halves(400, derive_stream(seed, 0)).unwrap();
        for i in a {
            hits[i] += 1;
        }
    }
    for (i, h) in hits.iter().enumerate() {
        let f = *h as f64 / 100.0;
        assert!((f - 0.5).abs() <= 0.2, "row {i}: {f}");
    }
    let var = hits.iter().map(|&h| (h as f64 - 50.0).powi(2)).sum::<f64>() / 400.0;
    assert!((var / 25.0 - 1.0).abs() < 0.3, "count variance {var}");
}

#[test]
fn zero_grid_reproduces_the_forest_average() {
    let data = poly_data(120, 8, 2.0, 3);
    let cfg = FitConfig {
        theta_grid: vec![0.0],
        ..small_config(3)
    };
    let model = fit_lassoed(&data, &cfg).unwrap();
    assert_eq!(model.theta_hat, 0.0);
    for i in 0..data.n_rows() {
        let x = data.row(i);
        let want = model.transform.invert(forest_mean_predict(&model.forest, &x).unwrap());
        assert!((model.predict(&x).unwrap() - want).abs() <= 1e-12);
    }
}

#[test]
fn unit_grid_is_post_selection() {
    let data = poly_data(120, 8, 2.0, 4);
    let cfg = FitConfig {
        theta_grid: vec![1.0],
        ..small_config(4)
    };
    assert_eq!(fit_lassoed(&data, &cfg).unwrap(), fit_post_selection(&data, &small_config(4)).unwrap());
}

#[test]
fn identical_trees_keep_one_coefficient() {
    // two-valued feature with a noiseless step: every tree is the same stump
    let n = 40;
    let x = DMatrix::from_fn(n, 1, |i, _| (i % 2) as f64);
    let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let data = Dataset::new(x, y, None, None).unwrap();
    let cfg = FitConfig {
        theta_grid: vec![1.0],
        standardize_response: false,
        tree: TreeParams {
            mtry: Some(1),
            min_node_size: 1,
            max_leaf_nodes: Some(2),
        },
        ..small_config(5)
    };
    let model = fit_post_selection(&data, &cfg).unwrap();
    let first = &model.forest.trees[0];
    assert!(model.forest.trees.iter().all(|t| t.nodes() == first.nodes()));
    let nonzero = model.gamma_hat.iter().filter(|&&g| g != 0.0).count() + usize::from(model.gamma0_hat != 0.0);
    assert!(nonzero <= 2, "{nonzero} nonzero coefficients: {} {:?}", model.gamma0_hat, model.gamma_hat);
}

#[test]
fn lambda_max_collapses_to_zero() {
    let data = poly_data(100, 6, 2.0, 6);
    let cfg = FitConfig {
        lambda_fraction: Some(1.0),
        ..small_config(6)
    };
    let model = fit_post_selection(&data, &cfg).unwrap();
    assert_eq!(model.gamma0_hat, 0.0);
    assert!(model.gamma_hat.iter().all(|&g| g == 0.0));
    for i in 0..10 {
        assert_eq!(model.predict_standardized(&data.row(i)).unwrap(), 0.0);
    }
}

#[test]
fn selected_theta_is_the_curve_argmin() {
    let data = poly_data(160, 10, 4.0, 7);
    let model = fit_lassoed(&data, &small_config(7)).unwrap();
    assert_eq!(model.cv_curve.len(), 5);
    let min = model.cv_curve.iter().map(|c| c.error).fold(f64::INFINITY, f64::min);
    let first = model.cv_curve.iter().find(|c| c.error == min).unwrap();
    assert_eq!(model.theta_hat, first.theta);
    assert_eq!(model.gamma_hat.len(), 30);
}

#[test]
fn simplex_weights_reproduce_the_average() {
    let trees = vec![
        stump(0, 0.0, -1.0, 2.0, 2),
        stump(1, 0.5, 0.25, 4.0, 2),
        stump(0, 1.0, 3.0, -2.0, 2),
    ];
    let j = trees.len();
    let model = hand_model(trees, 1.0, 0.0, vec![1.0 / j as f64; j]);
    for x in [[-1.0, 0.0], [0.5, 1.0], [2.0, -3.0]] {
        let mean = forest_mean_predict(&model.forest, &x).unwrap();
        assert!((predict_lassoed(&model, &x).unwrap() - mean).abs() < 1e-12);
    }
}

#[test]
fn half_blend_by_hand() {
    let trees = vec![stump(0, 0.0, 1.0, 3.0, 1), stump(0, 2.0, -2.0, 5.0, 1)];
    let model = hand_model(trees, 0.5, 0.4, vec![0.7, -0.2]);
    // x = 1: trees give 3 and -2
    let reg = 0.4 + 0.7 * 3.0 - 0.2 * -2.0;
    let want = 0.5 * reg + 0.5 * 0.5;
    assert!((predict_lassoed(&model, &[1.0]).unwrap() - want).abs() < 1e-12);
    let mut shifted = model.clone();
    shifted.transform = ResponseTransform::new(10.0, 2.0).unwrap();
    assert!((shifted.predict(&[1.0]).unwrap() - (10.0 + 2.0 * want)).abs() < 1e-12);
    assert!(matches!(
        model.predict(&[1.0, 2.0]),
        Err(Error::DimensionMismatch { expected: 1, got: 2 })
    ));
}

#[test]
fn prediction_is_affine_in_theta() {
    let trees = vec![stump(0, 0.0, 1.0, 3.0, 1), stump(0, 2.0, -2.0, 5.0, 1)];
    let at = |t: f64| hand_model(trees.clone(), t, 0.3, vec![0.6, 0.9]).predict(&[3.0]).unwrap();
    for t in [0.1, 0.3, 0.5] {
        let avg = 0.5 * (at(t) + at(1.0 - t));
        let comp = 0.5 * (at(0.0) + at(1.0));
        assert!((avg - comp).abs() < 1e-12);
    }
}

#[test]
fn theta_zero_importance_is_raw_counts() {
    let trees = vec![stump(0, 0.0, 0.0, 1.0, 3), stump(2, 0.0, 0.0, 1.0, 3), stump(2, 1.0, 0.0, 1.0, 3)];
    let model = hand_model(trees, 0.0, 0.0, vec![0.0; 3]);
    let imp = variable_importance(&model, ImportanceWeights::Signed).unwrap();
    assert_eq!(imp.kappa, vec![1.0 / 3.0, 0.0, 2.0 / 3.0]);
    assert_eq!(imp.theta_used, 0.0);
}

#[test]
fn single_feature_forest_gives_unit_importance() {
    let trees = vec![stump(2, 0.0, 0.0, 1.0, 4), stump(2, 1.0, 1.0, 0.0, 4)];
    for theta in [0.0, 0.4, 1.0] {
        let model = hand_model(trees.clone(), theta, 0.1, vec![0.3, 0.8]);
        let imp = variable_importance(&model, ImportanceWeights::Signed).unwrap();
        assert_eq!(imp.kappa, vec![0.0, 0.0, 1.0, 0.0]);
    }
}

#[test]
fn blended_importance_by_hand() {
    let trees = vec![stump(0, 0.0, 0.0, 1.0, 2), stump(1, 0.0, 0.0, 1.0, 2), stump(1, 1.0, 0.0, 1.0, 2)];
    let model = hand_model(trees, 0.5, 0.0, vec![0.6, 0.2, 0.0]);
    let imp = variable_importance(&model, ImportanceWeights::Signed).unwrap();
    let want = [0.5 * 0.75 + 0.5 / 3.0, 0.5 * 0.25 + 0.5 * 2.0 / 3.0];
    for (a, b) in imp.kappa.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((imp.kappa.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn degenerate_importance_is_reported() {
    let leaf = tree_from_nodes(vec![Node::Leaf { value: 1.0 }], vec![0], 2).unwrap();
    let model = hand_model(vec![leaf.clone(), leaf], 0.0, 0.0, vec![0.0, 0.0]);
    assert!(matches!(
        variable_importance(&model, ImportanceWeights::Signed),
        Err(Error::DegenerateImportance(_))
    ));
    let trees = vec![stump(0, 0.0, 0.0, 1.0, 2), stump(0, 1.0, 0.0, 1.0, 2)];
    let cancel = hand_model(trees, 0.5, 0.0, vec![0.5, -0.5]);
    let err = variable_importance(&cancel, ImportanceWeights::Signed).unwrap_err();
    assert!(err.to_string().contains("absolute"));
    let abs = variable_importance(&cancel, ImportanceWeights::Absolute).unwrap();
    assert_eq!(abs.kappa, vec![1.0, 0.0]);
    let negative = hand_model(
        vec![stump(0, 0.0, 0.0, 1.0, 2), stump(1, 0.0, 0.0, 1.0, 2)],
        1.0,
        0.0,
        vec![1.0, -0.5],
    );
    let imp = variable_importance(&negative, ImportanceWeights::Signed).unwrap();
    assert!(imp.has_negative);
}

#[test]
fn fitted_importance_sums_to_one() {
    let data = poly_data(160, 10, 4.0, 8);
    let model = fit_lassoed(&data, &small_config(8)).unwrap();
    let imp = variable_importance(&model, ImportanceWeights::Absolute).unwrap();
    assert_eq!(imp.kappa.len(), 10);
    assert!((imp.kappa.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn response_affine_map_is_equivariant() {
    let data = poly_data(140, 8, 4.0, 9);
    let (a, b) = (5.0, 3.0);
    let moved = data
        .with_response(data.response().iter().map(|y| a + b * y).collect())
        .unwrap();
    let cfg = small_config(9);
    let m1 = fit_lassoed(&data, &cfg).unwrap();
    let m2 = fit_lassoed(&moved, &cfg).unwrap();
    assert_eq!(m1.theta_hat, m2.theta_hat);
    for i in 0..20 {
        let x = data.row(i);
        let p1 = m1.predict(&x).unwrap();
        let p2 = m2.predict(&x).unwrap();
        assert!((a + b * p1 - p2).abs() < 1e-6 * (1.0 + p2.abs()), "{p1} -> {p2}");
    }
}

#[test]
fn model_json_round_trip() {
    let data = poly_data(100, 5, 2.0, 10);
    let model = fit_lassoed(&data, &small_config(10)).unwrap();
    let text = model.to_json().unwrap();
    let back = LassoedModel::from_json(&text).unwrap();
    assert_eq!(back, model);
    let bumped = text.replacen("\"format_version\": 1", "\"format_version\": 99", 1);
    assert!(LassoedModel::from_json(&bumped).is_err());
}

#[test]
fn alternative_modes_run() {
    let data = poly_data(120, 6, 2.0, 11);
    for cfg in [
        FitConfig {
            cross_fit: false,
            ..small_config(11)
        },
        FitConfig {
            theta_zero_error: ThetaZeroError::Oob,
            ..small_config(11)
        },
        FitConfig {
            penalize_intercept: false,
            lambda_rule: LambdaRule::OneSe,
            ..small_config(11)
        },
    ] {
        let model = fit_lassoed(&data, &cfg).unwrap();
        assert!(cfg.theta_grid.contains(&model.theta_hat));
        assert!(model.predict(&data.row(0)).unwrap().is_finite());
    }
}

#[test]
fn config_validation() {
    let bad = [
        FitConfig {
            theta_grid: vec![],
            ..FitConfig::default()
        },
        FitConfig {
            theta_grid: vec![0.5, 0.25],
            ..FitConfig::default()
        },
        FitConfig {
            theta_grid: vec![0.0, 1.5],
            ..FitConfig::default()
        },
        FitConfig {
            cv_folds: 1,
            ..FitConfig::default()
        },
        FitConfig {
            n_trees: 0,
            ..FitConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
    let parsed: std::result::Result<FitConfig, _> = toml::from_str("n_trees = 10\nthetas = [0.0]\n");
    assert!(parsed.is_err());
    let parsed: FitConfig = toml::from_str("n_trees = 10\ntheta_grid = [0.0, 1.0]\n[tree]\nmax_leaf_nodes = 8\n").unwrap();
    assert_eq!(parsed.n_trees, 10);
    assert_eq!(parsed.tree.max_leaf_nodes, Some(8));
}

#[test]
fn fits_are_deterministic_across_thread_counts() {
    let data = poly_data(120, 6, 2.0, 12);
    let cfg = small_config(12);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| fit_lassoed(&data, &cfg).unwrap().to_json().unwrap())
    };
    assert_eq!(run(1), run(4));
}
