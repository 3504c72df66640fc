//! CSV and JSON serialization. Floats are written with 17 significant digits
//! so every value round-trips exactly.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Error;
use crate::linalg::Matrix;
use crate::model::Dataset;
use crate::ntk::KernelMatrix;

/// Errors from the filesystem or the CSV/JSON layers.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Model(#[from] Error),
}

pub type IoResult<T> = std::result::Result<T, IoError>;

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl ToString) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

/// 17 significant digits in scientific notation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> IoResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, e))?;
    w.write_record(header).map_err(|e| format_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(fs_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> IoResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    fs::write(path, text + "\n").map_err(fs_err(path))
}

/// Header `x_1,...,x_d,y`, one sample per row.
pub fn write_dataset(path: &Path, data: &Dataset) -> IoResult<()> {
    let mut header: Vec<String> = (1..=data.d()).map(|k| format!("x_{k}")).collect();
    header.push("y".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = (0..data.n())
        .map(|i| {
            data.x(i)
                .iter()
                .chain(std::iter::once(&data.targets[i]))
                .map(|&v| fmt_f64(v))
                .collect()
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn read_dataset(path: &Path) -> IoResult<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let header = r.headers().map_err(|e| format_err(path, e))?.clone();
    let d = header.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| format_err(path, "need at least one input column and y"))?;
    for (k, name) in header.iter().enumerate() {
        let want = if k == d { "y".to_string() } else { format!("x_{}", k + 1) };
        if name != want {
            return Err(format_err(path, format!("column {} is `{name}`, expected `{want}`", k + 1)));
        }
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| format_err(path, e))?;
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| format_err(path, format!("row {}: {e}", line + 1)))?;
        targets.push(vals[d]);
        rows.push(vals[..d].to_vec());
    }
    Ok(Dataset::new(Matrix::from_rows(&rows)?, targets)?)
}

/// Row-major kernel entries without a header.
pub fn write_kernel(path: &Path, k: &KernelMatrix) -> IoResult<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| format_err(path, e))?;
    for i in 0..k.n() {
        let row: Vec<String> = k.entries.row(i).iter().map(|&v| fmt_f64(v)).collect();
        w.write_record(&row).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(fs_err(path))
}
