use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "experiment,model,theta,dim,J,replicate,step,metric_name,value";

/// One tidy result row. `None` renders as an empty cell and marks a column
/// that does not apply (an aggregate over replicates, a per-run summary).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    pub model: String,
    pub theta: f64,
    pub dim: usize,
    #[serde(rename = "J")]
    pub j: Option<usize>,
    pub replicate: Option<usize>,
    pub step: Option<usize>,
    pub metric_name: String,
    pub value: f64,
}

fn cell<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl Row {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.model,
            self.theta,
            self.dim,
            cell(&self.j),
            cell(&self.replicate),
            cell(&self.step),
            self.metric_name,
            self.value
        )
    }
}

pub fn rows_to_csv(rows: &[Row]) -> String {
    let mut out = String::with_capacity(rows.len() * 64);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// A least-squares fit of `log error` on `log J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub metric_name: String,
    pub j_values: Vec<usize>,
    pub errors: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// A replicate that failed, kept so that nothing is dropped silently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub j: Option<usize>,
    pub dim: usize,
    pub replicate: usize,
    pub error_code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub library_version: String,
    pub rows: Vec<Row>,
    pub fits: Vec<FitRecord>,
    pub failures: Vec<FailureRecord>,
    /// Experiment-specific summary such as the epsilon and error arrays.
    pub summary: serde_json::Value,
    /// Excluded from the data files; written to a separate timing file.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn fit(&self, metric_name: &str) -> Option<&FitRecord> {
        self.fits.iter().find(|f| f.metric_name == metric_name)
    }

    pub fn csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct WrittenFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub timing: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

/// Writes `<experiment>.csv`, `<experiment>.json` and `<experiment>.timing.json`.
/// Only the timing file depends on anything but the config.
pub fn write_record(record: &RunRecord, dir: &Path) -> Result<WrittenFiles> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
    let stem = record.config.experiment.as_str();
    let files = WrittenFiles {
        csv: dir.join(format!("{stem}.csv")),
        json: dir.join(format!("{stem}.json")),
        timing: dir.join(format!("{stem}.timing.json")),
    };
    write(&files.csv, &record.csv())?;
    write(&files.json, &record.json())?;
    let timing = serde_json::json!({
        "experiment": stem,
        "wall_clock_seconds": record.wall_clock_seconds,
        "library_version": record.library_version,
    });
    write(&files.timing, &serde_json::to_string_pretty(&timing)?)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let row = Row {
            experiment: "pf-rate".into(),
            model: "linear1d".into(),
            theta: 0.0,
            dim: 1,
            j: Some(100),
            replicate: None,
            step: Some(3),
            metric_name: "d_tv_dict".into(),
            value: 0.125,
        };
        assert_eq!(row.csv_line(), "pf-rate,linear1d,0,1,100,,3,d_tv_dict,0.125");
        let csv = rows_to_csv(&[row]);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 2);
    }
}
