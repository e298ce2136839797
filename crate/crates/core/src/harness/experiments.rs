use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{ExperimentConfig, ExperimentKind};
use super::output::{FailureRecord, FitRecord, Row, RunRecord};
use crate::enkf::{enkf_filter, mf_enkf_gaussian_filter};
use crate::error::{Error, Result};
use crate::exact::{grid_filter, kalman_filter};
use crate::measures::EmpiricalMeasure;
use crate::metrics::{
    dg_dictionary, dictionary_expectations, epsilon_dictionary_estimate, epsilon_estimate, make_dictionary,
    DRandomAccumulator, DictionaryKind,
};
use crate::models::{builtin_model, simulate, DataRecord, ModelParams, StateSpaceModel};
use crate::par;
use crate::pf::{effective_sample_size, pf_filter};
use crate::rng::RngStream;

/// Label attached to large-J EnKF runs standing in for the mean-field limit.
pub const MEAN_FIELD_LABEL: &str = "mean-field (particle-approximated)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `log error` on `log J`.
pub fn fit_rate(j_values: &[usize], errors: &[f64]) -> Result<RateFit> {
    if j_values.len() != errors.len() {
        return Err(Error::Fit(format!("{} J values but {} errors", j_values.len(), errors.len())));
    }
    if j_values.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", j_values.len())));
    }
    if let Some(e) = errors.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::Fit(format!("errors must be positive and finite, got {e}")));
    }
    if j_values.contains(&0) {
        return Err(Error::Fit("J must be positive".into()));
    }
    let x: Vec<f64> = j_values.iter().map(|j| (*j as f64).ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|xi| (xi - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("J values must not all coincide".into()));
    }
    let sxy: f64 = x.iter().zip(&y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(&y).map(|(xi, yi)| (yi - intercept - slope * xi).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|yi| (yi - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(RateFit { slope, intercept, r_squared })
}

/// The truth and observations shared by all replicates.
pub fn data_stream(seed: u64) -> RngStream {
    RngStream::new(seed, 0)
}

/// Randomness of replicate `r`, further split by the caller.
pub fn replicate_stream(seed: u64, r: usize) -> RngStream {
    RngStream::new(seed, 1).child(r as u64)
}

/// Simulated data for a config: the model run over the config's horizon.
pub fn simulate_data(cfg: &ExperimentConfig) -> Result<DataRecord> {
    simulate(&cfg.model.build()?, cfg.n_steps, &data_stream(cfg.seed))
}

struct Sink {
    experiment: &'static str,
    model: String,
    theta: f64,
    dim: usize,
    rows: Vec<Row>,
    failures: Vec<FailureRecord>,
}

impl Sink {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            experiment: cfg.experiment.as_str(),
            model: cfg.model.name.clone(),
            theta: cfg.model.params.theta,
            dim: 0,
            rows: Vec::new(),
            failures: Vec::new(),
        }
    }

    fn push(&mut self, j: Option<usize>, replicate: Option<usize>, step: Option<usize>, name: &str, value: f64) {
        self.rows.push(Row {
            experiment: self.experiment.to_string(),
            model: self.model.clone(),
            theta: self.theta,
            dim: self.dim,
            j,
            replicate,
            step,
            metric_name: name.to_string(),
            value,
        });
    }

    fn fail(&mut self, j: Option<usize>, replicate: usize, e: &Error) {
        self.push(j, Some(replicate), None, &format!("error:{}", e.code()), f64::NAN);
        self.failures.push(FailureRecord {
            j,
            dim: self.dim,
            replicate,
            error_code: e.code().to_string(),
            message: e.to_string(),
        });
    }
}

fn sup(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn max_abs_diff<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct ReplicateOutcome {
    expectations: Vec<Vec<f64>>,
    mean_error: Vec<f64>,
    cov_error: Vec<f64>,
}

fn rate_experiment<F>(cfg: &ExperimentConfig, sink: &mut Sink, run: F) -> Result<(Vec<FitRecord>, serde_json::Value)>
where
    F: Fn(&StateSpaceModel, &DataRecord, usize, &RngStream) -> Result<Vec<EmpiricalMeasure>> + Sync,
{
    let model = cfg.model.build()?;
    sink.dim = model.state_dim();
    let data = simulate(&model, cfg.n_steps, &data_stream(cfg.seed))?;
    let reference = kalman_filter(&model, &data)?;
    let dict = make_dictionary(DictionaryKind::TvDefault, model.state_dim())?;
    let names = ["d_tv_dict", "mean_error_rms", "cov_error_rms"];
    let mut sups: Vec<Vec<f64>> = vec![Vec::new(); names.len()];

    for &j in &cfg.j_values {
        let outcomes = par::map_range(cfg.replicates, |r| -> Result<ReplicateOutcome> {
            let measures = run(&model, &data, j, &replicate_stream(cfg.seed, r).child(j as u64))?;
            let mut out = ReplicateOutcome { expectations: vec![], mean_error: vec![], cov_error: vec![] };
            for (m, k) in measures.iter().zip(&reference) {
                out.expectations.push(dictionary_expectations(m, &dict)?);
                out.mean_error.push((m.mean() - &k.mean).norm());
                out.cov_error.push((m.covariance()? - &k.cov).norm());
            }
            Ok(out)
        });
        let mut acc = DRandomAccumulator::new(&reference, &dict)?;
        let steps = reference.len();
        let (mut mean_sq, mut cov_sq, mut ok) = (vec![0.0; steps], vec![0.0; steps], 0usize);
        for (r, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(o) => {
                    acc.add_expectations(&o.expectations)?;
                    for n in 0..steps {
                        sink.push(Some(j), Some(r), Some(n), "mean_error", o.mean_error[n]);
                        sink.push(Some(j), Some(r), Some(n), "cov_error", o.cov_error[n]);
                        mean_sq[n] += o.mean_error[n].powi(2);
                        cov_sq[n] += o.cov_error[n].powi(2);
                    }
                    ok += 1;
                }
                Err(e) => sink.fail(Some(j), r, &e),
            }
        }
        if ok == 0 {
            return Err(Error::Fit(format!("every replicate failed at J = {j}")));
        }
        let per_step = [
            acc.finish()?.per_step,
            mean_sq.iter().map(|s| (s / ok as f64).sqrt()).collect(),
            cov_sq.iter().map(|s| (s / ok as f64).sqrt()).collect(),
        ];
        for (k, name) in names.iter().enumerate() {
            for (n, v) in per_step[k].iter().enumerate() {
                sink.push(Some(j), None, Some(n), name, *v);
            }
            let s = sup(&per_step[k]);
            sink.push(Some(j), None, None, &format!("{name}_sup"), s);
            sups[k].push(s);
        }
    }

    let mut fits = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let metric_name = format!("{name}_sup");
        let fit = fit_rate(&cfg.j_values, &sups[k])?;
        sink.push(None, None, None, &format!("{metric_name}_slope"), fit.slope);
        sink.push(None, None, None, &format!("{metric_name}_r2"), fit.r_squared);
        fits.push(FitRecord {
            metric_name,
            j_values: cfg.j_values.clone(),
            errors: sups[k].clone(),
            slope: fit.slope,
            intercept: fit.intercept,
            r_squared: fit.r_squared,
        });
    }
    Ok((fits, json!({ "reference": "kalman" })))
}

fn pf_run(model: &StateSpaceModel, data: &DataRecord, j: usize, rng: &RngStream) -> Result<Vec<EmpiricalMeasure>> {
    pf_filter(model, data, j, rng)?.iter().map(|s| s.to_measure()).collect()
}

fn mf_exactness(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<serde_json::Value> {
    let model = cfg.model.build()?;
    sink.dim = model.state_dim();
    let data = simulate(&model, cfg.n_steps, &data_stream(cfg.seed))?;
    let mf = mf_enkf_gaussian_filter(&model, &data)?;
    let kf = kalman_filter(&model, &data)?;
    let mut worst: f64 = 0.0;
    for (n, (a, b)) in mf.iter().zip(&kf).enumerate() {
        let dm = max_abs_diff(a.mean.iter(), b.mean.iter());
        let dc = max_abs_diff(a.cov.iter(), b.cov.iter());
        sink.push(None, None, Some(n), "mean_deviation", dm);
        sink.push(None, None, Some(n), "cov_deviation", dc);
        worst = worst.max(dm).max(dc);
    }
    sink.push(None, None, None, "max_deviation", worst);
    Ok(json!({ "max_deviation": worst }))
}

fn collapse(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<serde_json::Value> {
    let j = cfg.j_or(100);
    let (mut medians, mut ess_medians) = (Vec::new(), Vec::new());
    for &d in &cfg.dims {
        sink.dim = d;
        let params = ModelParams { dim: d, obs_dim: Some(d), ..cfg.model.params.clone() };
        let model = builtin_model(&cfg.model.name, &params)?;
        let outcomes = par::map_range(cfg.replicates, |r| -> Result<Vec<(f64, f64)>> {
            let stream = replicate_stream(cfg.seed, r).child(d as u64);
            let data = simulate(&model, cfg.n_steps, &stream.child(0))?;
            let states = pf_filter(&model, &data, j, &stream.child(1))?;
            Ok(states[1..]
                .iter()
                .map(|s| {
                    let w = effective_sample_size(&s.weights);
                    (w.max_weight, w.ess)
                })
                .collect())
        });
        let (mut last_max, mut last_ess) = (Vec::new(), Vec::new());
        for (r, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(per_step) => {
                    for (n, (mw, ess)) in per_step.iter().enumerate() {
                        sink.push(Some(j), Some(r), Some(n + 1), "max_weight", *mw);
                        sink.push(Some(j), Some(r), Some(n + 1), "ess", *ess);
                    }
                    let (mw, ess) = per_step[per_step.len() - 1];
                    last_max.push(mw);
                    last_ess.push(ess);
                }
                Err(e) => sink.fail(Some(j), r, &e),
            }
        }
        let (m, e) = (median(&mut last_max), median(&mut last_ess));
        sink.push(Some(j), None, Some(cfg.n_steps), "median_max_weight", m);
        sink.push(Some(j), None, Some(cfg.n_steps), "median_ess", e);
        medians.push(m);
        ess_medians.push(e);
    }
    Ok(json!({
        "J": j,
        "dims": cfg.dims,
        "median_max_weight": medians,
        "median_ess": ess_medians,
    }))
}

fn epsilon_trend(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<serde_json::Value> {
    let weighted1 = make_dictionary(DictionaryKind::WeightedDefault, 1)?;
    let weighted2 = make_dictionary(DictionaryKind::WeightedDefault, 2)?;
    let (mut eps, mut eps_dict, mut errs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut eps_steps, mut err_steps) = (Vec::new(), Vec::new());
    for &theta in &cfg.thetas {
        sink.theta = theta;
        let model = builtin_model(&cfg.model.name, &ModelParams { theta, ..cfg.model.params.clone() })?;
        sink.dim = model.state_dim();
        let data = simulate(&model, cfg.n_steps, &data_stream(cfg.seed))?;
        let mus = grid_filter(&model, &data, &cfg.grid)?;
        let report = epsilon_estimate(&model, &mus, &cfg.epsilon_grid)?;
        let lower = epsilon_dictionary_estimate(&model, &mus, &cfg.epsilon_grid, &weighted2)?;
        // common random numbers across theta
        let ensembles = enkf_filter(&model, &data, cfg.reference_j, cfg.variant, &replicate_stream(cfg.seed, 0))?;
        let err_n = ensembles
            .iter()
            .zip(&mus)
            .map(|(e, mu)| dg_dictionary(mu, &e.to_measure(), &weighted1))
            .collect::<Result<Vec<_>>>()?;
        let j = Some(cfg.reference_j);
        for n in 0..mus.len() {
            sink.push(None, None, Some(n), "epsilon_grid", report.per_step[n]);
            sink.push(None, None, Some(n), "epsilon_dict", lower[n]);
            sink.push(j, None, Some(n), "err_dg_dict", err_n[n]);
        }
        sink.push(None, None, None, "epsilon", report.epsilon);
        sink.push(None, None, None, "epsilon_dict_max", sup(&lower));
        sink.push(j, None, None, "err", sup(&err_n));
        eps.push(report.epsilon);
        eps_dict.push(sup(&lower));
        errs.push(sup(&err_n));
        eps_steps.push(report.per_step);
        err_steps.push(err_n);
    }
    Ok(json!({
        "theta": cfg.thetas,
        "epsilon": eps,
        "err": errs,
        "epsilon_dict": eps_dict,
        "epsilon_per_step": eps_steps,
        "err_per_step": err_steps,
        "mean_field": MEAN_FIELD_LABEL,
        "reference_j": cfg.reference_j,
    }))
}

fn moments_rows(sink: &mut Sink, filter: &str, n: usize, mean: &DVector<f64>, var: impl Iterator<Item = f64>) {
    for (i, m) in mean.iter().enumerate() {
        sink.push(None, None, Some(n), &format!("{filter}.mean{i}"), *m);
    }
    for (i, v) in var.enumerate() {
        sink.push(None, None, Some(n), &format!("{filter}.var{i}"), v);
    }
}

fn single_run(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<serde_json::Value> {
    let model = cfg.model.build()?;
    sink.dim = model.state_dim();
    let data = simulate(&model, cfg.n_steps, &data_stream(cfg.seed))?;
    let j = cfg.j_or(1000);
    let mut filters = Vec::new();
    for (n, v) in data.truth.iter().enumerate() {
        for (i, x) in v.iter().enumerate() {
            sink.push(None, None, Some(n), &format!("truth{i}"), *x);
        }
    }
    if model.is_linear() {
        for (n, s) in kalman_filter(&model, &data)?.iter().enumerate() {
            moments_rows(sink, "kalman", n, &s.mean, s.cov.diagonal().iter().copied());
        }
        filters.push("kalman");
    }
    if model.state_dim() == 1 && model.obs_dim() == 1 {
        for (n, p) in grid_filter(&model, &data, &cfg.grid)?.iter().enumerate() {
            moments_rows(sink, "grid", n, &DVector::from_element(1, p.mean()), std::iter::once(p.variance()));
        }
        filters.push("grid");
    }
    let cov_diag = |m: &EmpiricalMeasure| -> Result<Vec<f64>> { Ok(m.covariance()?.diagonal().iter().copied().collect()) };
    for (n, s) in pf_filter(&model, &data, j, &replicate_stream(cfg.seed, 0).child(0))?.iter().enumerate() {
        let m = s.to_measure()?;
        moments_rows(sink, "pf", n, &m.mean(), cov_diag(&m)?.into_iter());
    }
    let ens = enkf_filter(&model, &data, j, cfg.variant, &replicate_stream(cfg.seed, 0).child(1))?;
    for (n, e) in ens.iter().enumerate() {
        moments_rows(sink, "enkf", n, &e.mean(), e.covariance().diagonal().iter().copied());
    }
    filters.extend(["pf", "enkf"]);
    Ok(json!({ "filters": filters, "J": j }))
}

/// Runs one experiment. Deterministic given the config (seed included)
/// regardless of thread count; only `wall_clock_seconds` varies.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut sink = Sink::new(cfg);
    let mut fits = Vec::new();
    let summary = match cfg.experiment {
        ExperimentKind::PfRate => {
            let (f, s) = rate_experiment(cfg, &mut sink, pf_run)?;
            fits = f;
            s
        }
        ExperimentKind::EnkfRate => {
            let variant = cfg.variant;
            let (f, s) = rate_experiment(cfg, &mut sink, |m, d, j, rng| {
                Ok(enkf_filter(m, d, j, variant, rng)?.iter().map(|e| e.to_measure()).collect())
            })?;
            fits = f;
            s
        }
        ExperimentKind::MfExactness => mf_exactness(cfg, &mut sink)?,
        ExperimentKind::Collapse => collapse(cfg, &mut sink)?,
        ExperimentKind::EpsilonTrend => epsilon_trend(cfg, &mut sink)?,
        ExperimentKind::SingleRun => single_run(cfg, &mut sink)?,
    };
    Ok(RunRecord {
        // where the files go is not part of the experiment
        config: ExperimentConfig { output: None, ..cfg.clone() },
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        rows: sink.rows,
        fits,
        failures: sink.failures,
        summary,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::default_config;

    #[test]
    fn exact_power_law() {
        let js = [100, 1000, 10_000, 100_000];
        let errs: Vec<f64> = js.iter().map(|j| 3.0 / (*j as f64).sqrt()).collect();
        let fit = fit_rate(&js, &errs).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_errors() {
        let fit = fit_rate(&[10, 20, 40], &[0.3; 3]).unwrap();
        assert!(fit.slope.abs() < 1e-15);
    }

    #[test]
    fn fit_preconditions() {
        assert!(matches!(fit_rate(&[10, 100], &[0.1, 0.01]), Err(Error::Fit(_))));
        assert!(matches!(fit_rate(&[10, 100, 1000], &[0.1, 0.0, 0.01]), Err(Error::Fit(_))));
        assert!(matches!(fit_rate(&[10, 100, 1000], &[0.1, -1.0, 0.01]), Err(Error::Fit(_))));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn mf_exactness_record() {
        let rec = run_experiment(&default_config(ExperimentKind::MfExactness)).unwrap();
        assert!(rec.summary["max_deviation"].as_f64().unwrap() < 1e-10);
        assert_eq!(rec.rows.iter().filter(|r| r.metric_name == "mean_deviation").count(), 21);
    }

    #[test]
    fn small_rate_run_is_reproducible() {
        let cfg = ExperimentConfig {
            j_values: vec![20, 40, 80],
            replicates: 4,
            n_steps: 3,
            ..default_config(ExperimentKind::PfRate)
        };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.csv(), b.csv());
        assert_eq!(a.json(), b.json());
        assert_eq!(a.fits.len(), 3);
        for row in &a.rows {
            assert_eq!(row.experiment, "pf-rate");
        }
    }

    #[test]
    fn single_run_covers_all_filters() {
        let cfg = ExperimentConfig { n_steps: 3, j_values: vec![200], ..default_config(ExperimentKind::SingleRun) };
        let rec = run_experiment(&cfg).unwrap();
        for f in ["kalman", "grid", "pf", "enkf"] {
            assert!(rec.rows.iter().any(|r| r.metric_name == format!("{f}.mean0")), "{f}");
        }
    }

    #[test]
    fn collapse_records_every_replicate() {
        let cfg = ExperimentConfig { dims: vec![1, 5], replicates: 3, ..default_config(ExperimentKind::Collapse) };
        let rec = run_experiment(&cfg).unwrap();
        let n = rec.rows.iter().filter(|r| r.metric_name == "max_weight").count();
        assert_eq!(n + rec.failures.len(), 6);
        assert_eq!(rec.summary["median_max_weight"].as_array().unwrap().len(), 2);
    }
}
