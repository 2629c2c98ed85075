//! Datasets, response standardization and CSV ingestion.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column name used for the true signal when a simulated dataset is exported.
pub const SIGNAL_COLUMN: &str = "__signal__";

/// Feature matrix plus response, with the noiseless signal attached when the
/// data came from a simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    response: Vec<f64>,
    signal: Option<Vec<f64>>,
    feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        response: Vec<f64>,
        signal: Option<Vec<f64>>,
        feature_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let (n, p) = features.shape();
        if p < 1 {
            return Err(Error::InvalidData("need at least one feature".into()));
        }
        if n < 2 {
            return Err(Error::TooFewRows { needed: 2, got: n });
        }
        if response.len() != n {
            return Err(Error::InvalidData(format!(
                "response has {} rows, features have {n}",
                response.len()
            )));
        }
        if let Some(s) = &signal {
            if s.len() != n {
                return Err(Error::InvalidData(format!(
                    "signal has {} rows, features have {n}",
                    s.len()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData("non-finite signal value".into()));
            }
        }
        if let Some(names) = &feature_names {
            if names.len() != p {
                return Err(Error::InvalidData(format!(
                    "{} feature names for {p} features",
                    names.len()
                )));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite feature value".into()));
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite response value".into()));
        }
        Ok(Dataset {
            features,
            response,
            signal,
            feature_names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn signal(&self) -> Option<&[f64]> {
        self.signal.as_deref()
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }

    /// Rows `rows` (in the given order) as a new dataset.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let p = self.n_features();
        let features = DMatrix::from_fn(rows.len(), p, |i, j| self.features[(rows[i], j)]);
        let response = rows.iter().map(|&i| self.response[i]).collect();
        let signal = self
            .signal
            .as_ref()
            .map(|s| rows.iter().map(|&i| s[i]).collect());
        Dataset::new(features, response, signal, self.feature_names.clone())
    }

    /// Same features with a different response; the signal is carried along.
    pub fn with_response(&self, response: Vec<f64>) -> Result<Dataset> {
        Dataset::new(
            self.features.clone(),
            response,
            self.signal.clone(),
            self.feature_names.clone(),
        )
    }
}

/// Affine map `y -> (y - center) / scale` and its inverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseTransform {
    pub center: f64,
    pub scale: f64,
}

impl ResponseTransform {
    pub fn identity() -> Self {
        ResponseTransform {
            center: 0.0,
            scale: 1.0,
        }
    }

    pub fn new(center: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite() && center.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "transform needs finite center and positive scale, got ({center}, {scale})"
            )));
        }
        Ok(ResponseTransform { center, scale })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.center) / self.scale
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.scale + self.center
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation with divisor `n - 1`.
pub fn sample_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Center the response to mean 0 and scale it to sample sd 1.
pub fn standardize_response(data: &Dataset) -> Result<(Dataset, ResponseTransform)> {
    let y = data.response();
    if y.len() < 2 {
        return Err(Error::TooFewRows {
            needed: 2,
            got: y.len(),
        });
    }
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        return Err(Error::DegenerateScale);
    }
    let center = mean(y);
    let scale = sample_sd(y);
    if !(scale > 0.0) {
        return Err(Error::DegenerateScale);
    }
    let transform = ResponseTransform::new(center, scale)?;
    let z = y.iter().map(|&v| transform.apply(v)).collect();
    Ok((data.with_response(z)?, transform))
}

fn csv_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Header plus numeric rows of a CSV file.
struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e.to_string()))?;
        let mut row = Vec::with_capacity(record.len());
        for (col, cell) in record.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| {
                csv_err(
                    path,
                    format!(
                        "row {}, column '{}': non-numeric cell '{cell}'",
                        line + 1,
                        header.get(col).map(String::as_str).unwrap_or("?")
                    ),
                )
            })?;
            if !value.is_finite() {
                return Err(csv_err(path, format!("row {}: non-finite value", line + 1)));
            }
            row.push(value);
        }
        rows.push(row);
    }
    Ok(RawTable { header, rows })
}

/// Read a dataset: `response_column` becomes the response, a column named
/// [`SIGNAL_COLUMN`] (if present) the signal, everything else features.
pub fn read_csv(path: impl AsRef<Path>, response_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let response_idx = table
        .header
        .iter()
        .position(|h| h == response_column)
        .ok_or_else(|| csv_err(path, format!("no column named '{response_column}'")))?;
    let signal_idx = table.header.iter().position(|h| h == SIGNAL_COLUMN);
    let feature_cols: Vec<usize> = (0..table.header.len())
        .filter(|&c| c != response_idx && Some(c) != signal_idx)
        .collect();
    let names = feature_cols.iter().map(|&c| table.header[c].clone()).collect();
    let n = table.rows.len();
    let features = DMatrix::from_fn(n, feature_cols.len(), |i, j| table.rows[i][feature_cols[j]]);
    let response = table.rows.iter().map(|r| r[response_idx]).collect();
    let signal = signal_idx.map(|s| table.rows.iter().map(|r| r[s]).collect());
    Dataset::new(features, response, signal, Some(names))
}

/// Read a feature-only table for prediction. Zero data rows are allowed.
/// Columns named `drop` (e.g. a response column) are ignored if present.
pub fn read_feature_csv(path: impl AsRef<Path>, drop: &[&str]) -> Result<(Vec<String>, DMatrix<f64>)> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let keep: Vec<usize> = (0..table.header.len())
        .filter(|&c| {
            let h = table.header[c].as_str();
            h != SIGNAL_COLUMN && !drop.contains(&h)
        })
        .collect();
    let names = keep.iter().map(|&c| table.header[c].clone()).collect();
    let features = DMatrix::from_fn(table.rows.len(), keep.len(), |i, j| table.rows[i][keep[j]]);
    Ok((names, features))
}

/// Write a dataset with the response under `response_column`, followed by
/// the signal column when present.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>, response_column: &str) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e.to_string()))?;
    let p = data.n_features();
    let mut header: Vec<String> = match data.feature_names() {
        Some(names) => names.to_vec(),
        None => (1..=p).map(|j| format!("x{j}")).collect(),
    };
    header.push(response_column.to_string());
    if data.signal().is_some() {
        header.push(SIGNAL_COLUMN.to_string());
    }
    writer
        .write_record(&header)
        .map_err(|e| csv_err(path, e.to_string()))?;
    for i in 0..data.n_rows() {
        let mut record: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        record.push(data.response()[i].to_string());
        if let Some(s) = data.signal() {
            record.push(s[i].to_string());
        }
        writer
            .write_record(&record)
            .map_err(|e| csv_err(path, e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
