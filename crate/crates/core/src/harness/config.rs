use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enkf::GainVariant;
use crate::error::{Error, Result};
use crate::exact::GridParams;
use crate::metrics::EpsilonGrid;
use crate::models::{builtin_model, ModelParams, StateSpaceModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    PfRate,
    EnkfRate,
    MfExactness,
    Collapse,
    EpsilonTrend,
    SingleRun,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::PfRate => "pf-rate",
            ExperimentKind::EnkfRate => "enkf-rate",
            ExperimentKind::MfExactness => "mf-exactness",
            ExperimentKind::Collapse => "collapse",
            ExperimentKind::EpsilonTrend => "epsilon-trend",
            ExperimentKind::SingleRun => "single-run",
        }
    }

    pub fn is_rate(&self) -> bool {
        matches!(self, ExperimentKind::PfRate | ExperimentKind::EnkfRate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default)]
    pub params: ModelParams,
}

impl ModelSpec {
    pub fn build(&self) -> Result<StateSpaceModel> {
        builtin_model(&self.name, &self.params)
    }
}

fn one() -> usize {
    1
}

fn reference_j() -> usize {
    100_000
}

/// One experiment, as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub model: ModelSpec,
    /// Horizon `N`.
    pub n_steps: usize,
    /// Ensemble or particle counts.
    #[serde(default)]
    pub j_values: Vec<usize>,
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub variant: GainVariant,
    /// Output directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// `theta` values for `epsilon-trend`.
    #[serde(default)]
    pub thetas: Vec<f64>,
    /// State dimensions for `collapse`.
    #[serde(default)]
    pub dims: Vec<usize>,
    #[serde(default)]
    pub grid: GridParams,
    #[serde(default)]
    pub epsilon_grid: EpsilonGrid,
    /// Ensemble size standing in for the mean-field EnKF.
    #[serde(default = "reference_j")]
    pub reference_j: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1");
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if self.j_values.iter().any(|j| *j < 2) {
            return bad("every J must be at least 2");
        }
        if self.reference_j < 2 {
            return bad("reference_j must be at least 2");
        }
        match self.experiment {
            ExperimentKind::PfRate | ExperimentKind::EnkfRate => {
                if self.j_values.len() < 3 {
                    return bad("rate experiments need at least 3 J values");
                }
            }
            ExperimentKind::Collapse => {
                if self.dims.is_empty() || self.dims.contains(&0) {
                    return bad("collapse needs a nonempty list of positive dims");
                }
                if self.model.name != "linearNd" {
                    return bad("collapse runs on linearNd");
                }
            }
            ExperimentKind::EpsilonTrend => {
                if self.thetas.is_empty() {
                    return bad("epsilon-trend needs a nonempty list of thetas");
                }
                if self.model.name != "interpolated" {
                    return bad("epsilon-trend runs on the interpolated family");
                }
            }
            ExperimentKind::MfExactness | ExperimentKind::SingleRun => {}
        }
        let model = self.model.build()?;
        match self.experiment {
            ExperimentKind::PfRate | ExperimentKind::EnkfRate | ExperimentKind::MfExactness if !model.is_linear() => {
                bad("this experiment compares against the Kalman filter and needs a linear model")
            }
            _ => Ok(()),
        }
    }

    /// The first J, or `fallback` when none was given.
    pub fn j_or(&self, fallback: usize) -> usize {
        self.j_values.first().copied().unwrap_or(fallback)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

/// Built-in configurations, one per experiment.
pub fn default_config(kind: ExperimentKind) -> ExperimentConfig {
    let base = ExperimentConfig {
        experiment: kind,
        model: ModelSpec { name: "linear1d".into(), params: ModelParams::default() },
        n_steps: 10,
        j_values: vec![],
        replicates: 1,
        seed: 0,
        variant: GainVariant::default(),
        output: None,
        thetas: vec![],
        dims: vec![],
        grid: GridParams::default(),
        epsilon_grid: EpsilonGrid::default(),
        reference_j: reference_j(),
    };
    match kind {
        ExperimentKind::PfRate | ExperimentKind::EnkfRate => {
            let params = ModelParams { c0: 0.005, ..ModelParams::default() };
            ExperimentConfig {
                model: ModelSpec { name: "linear1d".into(), params },
                j_values: vec![100, 1000, 10_000],
                replicates: 50,
                ..base
            }
        }
        ExperimentKind::MfExactness => ExperimentConfig {
            model: ModelSpec {
                name: "linearNd".into(),
                params: ModelParams { dim: 4, obs_dim: Some(2), ..ModelParams::default() },
            },
            n_steps: 20,
            ..base
        },
        ExperimentKind::Collapse => ExperimentConfig {
            model: ModelSpec { name: "linearNd".into(), params: collapse_params() },
            n_steps: 1,
            j_values: vec![100],
            replicates: 20,
            dims: vec![1, 10, 50, 100],
            ..base
        },
        ExperimentKind::EpsilonTrend => ExperimentConfig {
            model: ModelSpec { name: "interpolated".into(), params: epsilon_params() },
            thetas: vec![0.0, 0.25, 0.5, 1.0],
            ..base
        },
        ExperimentKind::SingleRun => ExperimentConfig { j_values: vec![1000], ..base },
    }
}

/// Unit noise with no coupling: the classical high-dimensional collapse setup.
pub fn collapse_params() -> ModelParams {
    ModelParams { a: 0.5, coupling: 0.0, sigma: 1.0, gamma: 1.0, c0: 1.0, ..ModelParams::default() }
}

/// Small noise and a tight prior: the ensemble's sampling error at the
/// reference size stays below the gap an increase in theta opens up.
pub fn epsilon_params() -> ModelParams {
    ModelParams { a: 0.9, sigma: 0.05, gamma: 0.05, c0: 0.05, ..ModelParams::default() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for kind in [
            ExperimentKind::PfRate,
            ExperimentKind::EnkfRate,
            ExperimentKind::MfExactness,
            ExperimentKind::Collapse,
            ExperimentKind::EpsilonTrend,
            ExperimentKind::SingleRun,
        ] {
            let cfg = default_config(kind);
            cfg.validate().unwrap();
            assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        }
    }

    #[test]
    fn minimal_json() {
        let cfg = ExperimentConfig::from_json(
            r#"{"experiment": "single-run", "model": {"name": "sin-tanh"}, "n_steps": 3}"#,
        )
        .unwrap();
        assert_eq!(cfg.replicates, 1);
        assert_eq!(cfg.reference_j, 100_000);
        assert_eq!(cfg.model.params.alpha, 2.5);
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            r#"{"experiment": "pf-rate", "model": {"name": "linear1d"}, "n_steps": 3, "j_values": [10, 100]}"#,
            r#"{"experiment": "pf-rate", "model": {"name": "sin-tanh"}, "n_steps": 3, "j_values": [10, 100, 1000]}"#,
            r#"{"experiment": "single-run", "model": {"name": "linear1d"}, "n_steps": 0}"#,
            r#"{"experiment": "single-run", "model": {"name": "nope"}, "n_steps": 2}"#,
            r#"{"experiment": "single-run", "model": {"name": "linear1d"}, "n_steps": 2, "extra": 1}"#,
            r#"{"experiment": "epsilon-trend", "model": {"name": "linear1d"}, "n_steps": 2, "thetas": [0]}"#,
            r#"{"experiment": "collapse", "model": {"name": "linearNd"}, "n_steps": 1, "dims": []}"#,
            r#"{"experiment": "single-run", "model": {"name": "linear1d", "params": {"a": 1.5}}, "n_steps": 2}"#,
        ];
        for c in cases {
            let e = ExperimentConfig::from_json(c).unwrap_err();
            assert!(e.is_config_error(), "{c}: {e}");
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let e = ExperimentConfig::load(Path::new("/no/such/missing.json")).unwrap_err();
        assert!(e.is_config_error());
        assert!(e.to_string().contains("missing.json"));
    }
}
