//! Browser bindings: each export takes a JSON parameter string and returns
//! a JSON result string (or throws the error message).

use assimilate::enkf::{enkf_filter, GainVariant};
use assimilate::exact::{grid_filter, GridParams};
use assimilate::metrics::{epsilon_estimate, EpsilonGrid};
use assimilate::models::{builtin_model, simulate, ModelParams};
use assimilate::pf::{effective_sample_size, pf_filter};
use assimilate::{Error, RngStream};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    pub model: String,
    pub theta: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub n_steps: usize,
    pub j: usize,
    pub seed: u64,
    pub grid_points: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            model: "interpolated".into(),
            theta: 1.0,
            sigma: 0.1,
            gamma: 0.1,
            n_steps: 10,
            j: 500,
            seed: 1,
            grid_points: 801,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct FilterComparison {
    pub truth: Vec<f64>,
    pub observations: Vec<f64>,
    pub grid: Moments,
    pub pf: Moments,
    pub enkf: Moments,
    /// Final posterior: grid nodes and density, particles with weights, ensemble.
    pub final_nodes: Vec<f64>,
    pub final_density: Vec<f64>,
    pub final_particles: Vec<f64>,
    pub final_weights: Vec<f64>,
    pub final_members: Vec<f64>,
}

fn to_js(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn parse<T: for<'de> Deserialize<'de> + Default>(json: &str) -> Result<T, JsValue> {
    if json.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(json).map_err(|e| JsValue::from_str(&e.to_string()))
}

fn model_params(p: &FilterParams) -> ModelParams {
    ModelParams { a: 0.5, theta: p.theta, sigma: p.sigma, gamma: p.gamma, c0: 0.2, ..ModelParams::default() }
}

pub fn compare_filters(p: &FilterParams) -> assimilate::Result<FilterComparison> {
    let model = builtin_model(&p.model, &model_params(p))?;
    if model.state_dim() != 1 {
        return Err(Error::UnsupportedModel("the demo is scalar".into()));
    }
    let data = simulate(&model, p.n_steps, &RngStream::new(p.seed, 0))?;
    let grid = grid_filter(&model, &data, &GridParams { n_points: p.grid_points, ..GridParams::default() })?;
    let pf = pf_filter(&model, &data, p.j, &RngStream::new(p.seed, 1))?;
    let enkf = enkf_filter(&model, &data, p.j, GainVariant::default(), &RngStream::new(p.seed, 2))?;
    let mut out = FilterComparison {
        truth: data.truth.iter().map(|v| v[0]).collect(),
        observations: data.observations.iter().map(|v| v[0]).collect(),
        grid: Moments { mean: vec![], sd: vec![] },
        pf: Moments { mean: vec![], sd: vec![] },
        enkf: Moments { mean: vec![], sd: vec![] },
        final_nodes: vec![],
        final_density: vec![],
        final_particles: vec![],
        final_weights: vec![],
        final_members: vec![],
    };
    for g in &grid {
        out.grid.mean.push(g.mean());
        out.grid.sd.push(g.variance().sqrt());
    }
    for s in &pf {
        let m = s.to_measure()?;
        out.pf.mean.push(m.mean()[0]);
        out.pf.sd.push(m.covariance()?[(0, 0)].sqrt());
    }
    for e in &enkf {
        out.enkf.mean.push(e.mean()[0]);
        out.enkf.sd.push(e.covariance()[(0, 0)].sqrt());
    }
    let last = grid.last().expect("horizon is at least zero");
    out.final_nodes = last.axis().nodes().collect();
    out.final_density = last.values().to_vec();
    let s = pf.last().expect("nonempty");
    out.final_particles = s.particles.iter().map(|v| v[0]).collect();
    out.final_weights = s.weights.clone();
    out.final_members = enkf.last().expect("nonempty").members().iter().map(|v| v[0]).collect();
    Ok(out)
}

/// Grid, particle and ensemble Kalman filters on one simulated scalar problem.
#[wasm_bindgen]
pub fn filter_comparison(params_json: &str) -> Result<String, JsValue> {
    let p: FilterParams = parse(params_json)?;
    let out = compare_filters(&p).map_err(to_js)?;
    serde_json::to_string(&out).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct CollapseParams {
    pub dims: Vec<usize>,
    pub j: usize,
    pub seeds: usize,
    pub gamma: f64,
}

impl Default for CollapseParams {
    fn default() -> Self {
        Self { dims: vec![1, 2, 5, 10, 20, 50, 100], j: 100, seeds: 20, gamma: 1.0 }
    }
}

#[derive(Debug, Serialize)]
pub struct CollapseCurve {
    pub dims: Vec<usize>,
    pub median_max_weight: Vec<f64>,
    pub median_ess: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn collapse(p: &CollapseParams) -> assimilate::Result<CollapseCurve> {
    if p.seeds == 0 {
        return Err(Error::InvalidParameter("seeds must be positive".into()));
    }
    let mut out = CollapseCurve { dims: p.dims.clone(), median_max_weight: vec![], median_ess: vec![] };
    for &d in &p.dims {
        let params = ModelParams {
            a: 0.5,
            coupling: 0.0,
            sigma: 1.0,
            gamma: p.gamma,
            dim: d,
            obs_dim: Some(d),
            ..ModelParams::default()
        };
        let model = builtin_model("linearNd", &params)?;
        let (mut mw, mut ess) = (vec![], vec![]);
        for s in 0..p.seeds as u64 {
            let data = simulate(&model, 1, &RngStream::new(s, d as u64))?;
            let states = pf_filter(&model, &data, p.j, &RngStream::new(s, 1_000 + d as u64))?;
            let w = effective_sample_size(&states[1].weights);
            mw.push(w.max_weight);
            ess.push(w.ess);
        }
        out.median_max_weight.push(median(mw));
        out.median_ess.push(median(ess));
    }
    Ok(out)
}

/// Median largest particle weight after one update, against dimension.
#[wasm_bindgen]
pub fn collapse_curve(params_json: &str) -> Result<String, JsValue> {
    let p: CollapseParams = parse(params_json)?;
    let out = collapse(&p).map_err(to_js)?;
    serde_json::to_string(&out).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct EpsilonParams {
    pub thetas: Vec<f64>,
    pub sigma: f64,
    pub gamma: f64,
    pub n_steps: usize,
    pub seed: u64,
}

impl Default for EpsilonParams {
    fn default() -> Self {
        Self { thetas: vec![0.0, 0.25, 0.5, 0.75, 1.0], sigma: 0.1, gamma: 0.1, n_steps: 5, seed: 1 }
    }
}

#[derive(Debug, Serialize)]
pub struct EpsilonSweep {
    pub thetas: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub per_step: Vec<Vec<f64>>,
}

pub fn epsilon_sweep_values(p: &EpsilonParams) -> assimilate::Result<EpsilonSweep> {
    let grid = EpsilonGrid { n_u: 151, n_y: 151, half_width: 10.0 };
    let mut out = EpsilonSweep { thetas: p.thetas.clone(), epsilon: vec![], per_step: vec![] };
    for &theta in &p.thetas {
        let fp = FilterParams { theta, sigma: p.sigma, gamma: p.gamma, ..FilterParams::default() };
        let model = builtin_model("interpolated", &model_params(&fp))?;
        let data = simulate(&model, p.n_steps, &RngStream::new(p.seed, 0))?;
        let mus = grid_filter(&model, &data, &GridParams { n_points: 401, ..GridParams::default() })?;
        let rep = epsilon_estimate(&model, &mus, &grid)?;
        out.epsilon.push(rep.epsilon);
        out.per_step.push(rep.per_step);
    }
    Ok(out)
}

/// Gaussian mismatch of the true filter across the interpolated family.
#[wasm_bindgen]
pub fn epsilon_sweep(params_json: &str) -> Result<String, JsValue> {
    let p: EpsilonParams = parse(params_json)?;
    let out = epsilon_sweep_values(&p).map_err(to_js)?;
    serde_json::to_string(&out).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparison_shapes() {
        let p = FilterParams { n_steps: 4, j: 100, grid_points: 401, ..FilterParams::default() };
        let out = compare_filters(&p).unwrap();
        assert_eq!(out.truth.len(), 5);
        assert_eq!(out.observations.len(), 4);
        assert_eq!(out.pf.mean.len(), 5);
        assert_eq!(out.final_members.len(), 100);
        assert!((out.final_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collapse_grows_with_dimension() {
        let out = collapse(&CollapseParams { dims: vec![1, 50], seeds: 9, ..Default::default() }).unwrap();
        assert!(out.median_max_weight[0] < out.median_max_weight[1]);
    }

    #[test]
    fn epsilon_vanishes_at_zero() {
        let out = epsilon_sweep_values(&EpsilonParams { thetas: vec![0.0, 1.0], n_steps: 2, ..Default::default() }).unwrap();
        assert!(out.epsilon[0] < 1e-2);
        assert!(out.epsilon[1] > out.epsilon[0]);
    }
}
