use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lassoed_forest::data::read_feature_csv;
use lassoed_forest::ensemble::{predict_lassoed, LassoedModel};

const BIN: &str = env!("CARGO_BIN_EXE_lassoed-forest");

fn tiny_csv() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/tiny.csv")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn fit_config(dir: &Path, grid: &str) -> PathBuf {
    write(
        dir,
        "fit.toml",
        &format!("n_trees = 15\ncv_folds = 5\ntheta_grid = {grid}\n[path]\nn_lambda = 20\n"),
    )
}

fn fit(dir: &Path, grid: &str, seed: &str) -> (Output, PathBuf) {
    let cfg = fit_config(dir, grid);
    let out = run(&[
        "fit",
        tiny_csv().to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ]);
    (out, dir.join("model.json"))
}

fn load(path: &Path) -> LassoedModel {
    LassoedModel::from_json(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[test]
fn fit_zero_grid_gives_zero_theta() {
    let dir = tempfile::tempdir().unwrap();
    let (out, model) = fit(dir.path(), "[0.0]", "3");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = load(&model);
    assert_eq!(m.theta_hat, 0.0);
    let text = std::fs::read_to_string(&model).unwrap();
    assert!(text.contains("\"config_hash\""));
}

#[test]
fn fit_two_point_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (out, model) = fit(dir.path(), "[0.0, 1.0]", "3");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = load(&model);
    assert!(m.theta_hat == 0.0 || m.theta_hat == 1.0);
    assert_eq!(m.cv_curve.len(), 2);
}

#[test]
fn fit_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, ma) = fit(a.path(), "[0.0, 0.5, 1.0]", "9");
    let (_, mb) = fit(b.path(), "[0.0, 0.5, 1.0]", "9");
    assert_eq!(std::fs::read(ma).unwrap(), std::fs::read(mb).unwrap());
}

#[test]
fn predict_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fit(dir.path(), "[0.0, 0.5, 1.0]", "4");
    let out = run(&[
        "predict",
        model.to_str().unwrap(),
        tiny_csv().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = data_lines(&dir.path().join("predictions.csv"));
    assert_eq!(lines[0], "prediction");
    assert_eq!(lines.len(), 21);
    let m = load(&model);
    let (_, x) = read_feature_csv(tiny_csv(), &["y"]).unwrap();
    for (i, line) in lines[1..].iter().enumerate() {
        let cli: f64 = line.parse().unwrap();
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let api = predict_lassoed(&m, &row).unwrap();
        assert!((cli - api).abs() <= 1e-12);
    }
}

#[test]
fn zero_theta_predicts_tree_average() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fit(dir.path(), "[0.0]", "5");
    run(&[
        "predict",
        model.to_str().unwrap(),
        tiny_csv().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let lines = data_lines(&dir.path().join("predictions.csv"));
    let m = load(&model);
    let (_, x) = read_feature_csv(tiny_csv(), &["y"]).unwrap();
    for (i, line) in lines[1..].iter().enumerate() {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let avg = m.forest.mean_predict(&row).unwrap();
        let expected = m.transform.invert(avg);
        assert!((line.parse::<f64>().unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn predict_empty_input_writes_header() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fit(dir.path(), "[0.0, 1.0]", "6");
    let empty = write(dir.path(), "empty.csv", "x1,x2,x3\n");
    let out = run(&[
        "predict",
        model.to_str().unwrap(),
        empty.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data_lines(&dir.path().join("predictions.csv")), vec!["prediction"]);
}

#[test]
fn predict_dimension_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fit(dir.path(), "[0.0]", "6");
    let wide = write(dir.path(), "wide.csv", "a,b\n1,2\n");
    let out = run(&[
        "predict",
        model.to_str().unwrap(),
        wide.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(!dir.path().join("predictions.csv").exists());
}

#[test]
fn bad_inputs_exit_nonzero_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let bad_csv = write(dir.path(), "bad.csv", "x1,y\n1,abc\n");
    let out = run(&["fit", bad_csv.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-numeric"));

    let typo = write(dir.path(), "typo.toml", "n_tress = 10\n");
    let out = run(&[
        "fit",
        tiny_csv().to_str().unwrap(),
        "--config",
        typo.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(!dir.path().join("model.json").exists());

    let out = run(&["experiment", "bogus", "--config", typo.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn importance_sums_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fit(dir.path(), "[0.0]", "7");
    let out = run(&[
        "importance",
        model.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = data_lines(&dir.path().join("importance.csv"));
    assert_eq!(lines[0], "feature,kappa");
    let total: f64 = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
}

const SWEEP: &str = r#"
master_seed = 12
[sweep]
snr_grid = [1.0, 4.0]
replications = 2
test_size = 40
[sweep.dgp]
kind = "polynomial"
n = 60
p = 4
c = 1.0
[sweep.fit]
n_trees = 10
cv_folds = 3
theta_grid = [0.0, 0.5, 1.0]
[sweep.fit.path]
n_lambda = 10
"#;

fn reports(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().map(|e| e == ext).unwrap_or(false))
        .collect();
    v.sort();
    v
}

#[test]
fn sweep_experiment_rows_and_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.toml", SWEEP);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for (out, workers) in [(&out_a, "1"), (&out_b, "3")] {
        let o = run(&[
            "--workers",
            workers,
            "experiment",
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv_a = reports(&out_a, "csv");
    assert_eq!(csv_a.len(), 1);
    let name = csv_a[0].file_name().unwrap().to_str().unwrap().to_string();
    assert!(name.starts_with("sweep-") && name.ends_with("-seed12.csv"), "{name}");
    assert_eq!(data_lines(&csv_a[0]).len(), 1 + 3 * 2 * 2);
    for ext in ["csv", "json"] {
        let a = reports(&out_a, ext);
        let b = reports(&out_b, ext);
        assert_eq!(a[0].file_name(), b[0].file_name());
        assert_eq!(std::fs::read(&a[0]).unwrap(), std::fs::read(&b[0]).unwrap());
    }
}

#[test]
fn theory_experiment_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "theory.toml",
        r#"
[theory.oracle]
thetas = [0.0, 0.5, 1.0]
[theory.oracle.oracle]
w = [[1.0, 0.0], [0.0, 1.0]]
gamma = [0.2, 0.5, 0.5]
n = 12
sigma = 1.0
trials = 100
test_points = 10
"#,
    );
    let o = run(&[
        "experiment",
        "theory",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json = reports(dir.path(), "json");
    assert_eq!(json.len(), 1);
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json[0]).unwrap()).unwrap();
    let rows = value["report"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    for r in rows {
        assert!(r["formula_value"].is_number() && r["mc_value"].is_number() && r["mc_se"].is_number());
    }
}

#[test]
fn experiment_invalid_config_fails_early() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &SWEEP.replace("replications = 2", "replications = 1"));
    let out = dir.path().join("out");
    let o = run(&[
        "experiment",
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(!out.exists());
    let o = run(&[
        "experiment",
        "theory",
        "--config",
        write(dir.path(), "s.toml", SWEEP).to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(!out.exists());
}
