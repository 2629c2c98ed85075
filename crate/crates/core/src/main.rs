use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lassoed_forest::ensemble::{fit_lassoed, variable_importance, FitConfig, ImportanceWeights, LassoedModel};
use lassoed_forest::experiments::{
    bias_variance_decomposition, error_estimate_accuracy, importance_recovery, render, snr_sweep, write_rendered,
    Provenance, RenderedReport, SweepConfig,
};
use lassoed_forest::theory::{run_theory, TheoryRow, TheoryRunConfig};
use lassoed_forest::{data, Error, Result, RngStream};

#[derive(Debug, Parser)]
#[command(name = "lassoed-forest", version, about = "Random forests with Lasso-reweighted trees")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a Lassoed forest and write `model.json`.
    Fit {
        /// Training CSV with a header row.
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value = "y")]
        response_column: String,
        /// Held-out CSV; its MSE is printed after fitting.
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Predict with a fitted model and write `predictions.csv`.
    Predict {
        model: PathBuf,
        /// Feature CSV; a response column, if present, is ignored.
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value = "y")]
        response_column: String,
        /// Recorded in the output header.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Split-count importance of a fitted model, written to `importance.csv`.
    Importance {
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Weights::Signed)]
        weights: Weights,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a simulation study and write CSV and JSON reports.
    Experiment {
        #[arg(value_enum)]
        kind: Kind,
        #[arg(long)]
        config: PathBuf,
        /// Overrides `master_seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Weights {
    Signed,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Sweep,
    Decompose,
    ErrorAcc,
    Importance,
    Theory,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Sweep => "sweep",
            Kind::Decompose => "decompose",
            Kind::ErrorAcc => "error-acc",
            Kind::Importance => "importance",
            Kind::Theory => "theory",
        }
    }
}

/// Experiment file: seed and output location plus one of the study tables.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    #[serde(default)]
    master_seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    sweep: Option<SweepConfig>,
    #[serde(default)]
    theory: Option<TheoryRunConfig>,
}

#[derive(Serialize)]
struct ModelFile<'a> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    model: &'a LassoedModel,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_model(path: &Path) -> Result<LassoedModel> {
    LassoedModel::from_json(&read_text(path)?)
}

fn cmd_fit(
    data_path: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    response_column: &str,
    test: Option<&Path>,
) -> Result<()> {
    let mut cfg: FitConfig = match config {
        Some(p) => parse_toml(p)?,
        None => FitConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let train = data::read_csv(data_path, response_column)?;
    let test = test.map(|p| data::read_csv(p, response_column)).transpose()?;
    let model = fit_lassoed(&train, &cfg)?;
    let held_out = match &test {
        Some(t) => {
            let pred = model.predict_rows(t.features())?;
            let mse = pred.iter().zip(t.response()).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len().max(1) as f64;
            Some(mse)
        }
        None => None,
    };
    let provenance = Provenance::new(&cfg, cfg.seed)?;
    let mut text = serde_json::to_string_pretty(&ModelFile {
        provenance: &provenance,
        model: &model,
    })?;
    text.push('\n');
    let path = out.join("model.json");
    write_file(&path, &text)?;
    println!("model: {}", path.display());
    println!("theta_hat: {}", model.theta_hat);
    println!("nonzero trees: {}", model.gamma_hat.iter().filter(|g| **g != 0.0).count());
    if let Some(mse) = held_out {
        println!("held-out mse: {mse}");
    }
    Ok(())
}

fn cmd_predict(model_path: &Path, data_path: &Path, out: &Path, response_column: &str, seed: u64) -> Result<()> {
    let model = load_model(model_path)?;
    let (_, features) = data::read_feature_csv(data_path, &[response_column])?;
    let preds = model.predict_rows(&features)?;
    let provenance = Provenance::new(&model, seed)?;
    let mut text = provenance.header_lines();
    text.push_str("prediction\n");
    for p in preds {
        text.push_str(&format!("{p}\n"));
    }
    let path = out.join("predictions.csv");
    write_file(&path, &text)?;
    println!("predictions: {}", path.display());
    Ok(())
}

fn cmd_importance(model_path: &Path, weights: Weights, out: &Path, seed: u64) -> Result<()> {
    let model = load_model(model_path)?;
    let weights = match weights {
        Weights::Signed => ImportanceWeights::Signed,
        Weights::Absolute => ImportanceWeights::Absolute,
    };
    let imp = variable_importance(&model, weights)?;
    let provenance = Provenance::new(&model, seed)?;
    let mut text = provenance.header_lines();
    text.push_str("feature,kappa\n");
    for (j, k) in imp.kappa.iter().enumerate() {
        text.push_str(&format!("{},{k}\n", j + 1));
    }
    let path = out.join("importance.csv");
    write_file(&path, &text)?;
    if imp.has_negative {
        eprintln!("warning: some importances are negative; consider --weights absolute");
    }
    println!("importance: {}", path.display());
    Ok(())
}

fn run_sweep_kind(kind: Kind, cfg: &SweepConfig, seed: u64) -> Result<RenderedReport> {
    let stream = RngStream::new(seed, 0);
    let provenance = Provenance::new(cfg, seed)?;
    match kind {
        Kind::Sweep => {
            let r = snr_sweep(cfg, stream)?;
            render(&provenance, &r, &r.rows())
        }
        Kind::Decompose => {
            let r = bias_variance_decomposition(cfg, stream)?;
            render(&provenance, &r, &r.cells)
        }
        Kind::ErrorAcc => {
            let r = error_estimate_accuracy(cfg, stream)?;
            render(&provenance, &r, &r.records)
        }
        Kind::Importance => {
            let r = importance_recovery(cfg, stream)?;
            render(&provenance, &r, &r.rows())
        }
        Kind::Theory => unreachable!("handled separately"),
    }
}

fn cmd_experiment(kind: Kind, config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let file: ExperimentFile = parse_toml(config)?;
    let seed = seed.unwrap_or(file.master_seed);
    let out = out
        .map(Path::to_path_buf)
        .or(file.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let (provenance, rendered) = if kind == Kind::Theory {
        let cfg = file
            .theory
            .ok_or_else(|| Error::Config("experiment 'theory' needs a [theory] table".into()))?;
        cfg.validate()?;
        let provenance = Provenance::new(&cfg, seed)?;
        let records = run_theory(&cfg, RngStream::new(seed, 0))?;
        let rows: Vec<TheoryRow> = records.iter().map(TheoryRow::from).collect();
        let rendered = render(&provenance, &records, &rows)?;
        (provenance, rendered)
    } else {
        let cfg = file
            .sweep
            .ok_or_else(|| Error::Config(format!("experiment '{}' needs a [sweep] table", kind.name())))?;
        cfg.validate()?;
        let provenance = Provenance::new(&cfg, seed)?;
        let rendered = run_sweep_kind(kind, &cfg, seed)?;
        (provenance, rendered)
    };
    let (json, csv) = write_rendered(&out, &provenance.file_stem(kind.name()), &rendered)?;
    println!("report: {}", json.display());
    println!("report: {}", csv.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Fit {
            data,
            config,
            seed,
            out,
            response_column,
            test,
        } => cmd_fit(&data, config.as_deref(), seed, &out, &response_column, test.as_deref()),
        Command::Predict {
            model,
            data,
            out,
            response_column,
            seed,
        } => cmd_predict(&model, &data, &out, &response_column, seed),
        Command::Importance {
            model,
            weights,
            out,
            seed,
        } => cmd_importance(&model, weights, &out, seed),
        Command::Experiment { kind, config, seed, out } => cmd_experiment(kind, &config, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
