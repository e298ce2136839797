//! Experiment harness: JSON configs in, tidy CSV and JSON records out.
//!
//! Every result row has the columns
//! `experiment, model, theta, dim, J, replicate, step, metric_name, value`;
//! an empty cell means the column does not apply (for instance `replicate`
//! on a row aggregated over replicates). Failed replicates appear as rows
//! named `error:<code>` with value `NaN`.

#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod experiments;
pub mod output;

pub use config::{default_config, ExperimentConfig, ExperimentKind, ModelSpec};
pub use experiments::{fit_rate, run_experiment, simulate_data, RateFit, MEAN_FIELD_LABEL};
pub use output::{write_record, FitRecord, Row, RunRecord, CSV_HEADER};
