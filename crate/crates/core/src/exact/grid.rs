//! Tabulated densities for scalar problems and the true filtering recursion
//! evaluated by trapezoid quadrature.
//!
//! Every step places its grid at `[m - w s, m + w s]` (running mean and
//! standard deviation of the density being tabulated, `w = half_width`). The
//! prediction is evaluated directly on its new nodes; the posterior is moved to
//! its own placement by monotone cubic interpolation.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::interp::pchip_resample;
use crate::error::{Error, Result};
use crate::measures::{projection_from_moments, GaussianMeasure, GaussianProject, GaussianProjection};
use crate::models::{DataRecord, StateSpaceModel};
use crate::par;

/// Largest fraction of mass allowed to fall off a grid.
pub const OFF_GRID_TOLERANCE: f64 = 1e-3;
const NORMALIZATION_TOLERANCE: f64 = 1e-6;
const LIKELIHOOD_FLOOR: f64 = 1e-300;
/// Kernel terms with exponent below `-KERNEL_CUTOFF` are dropped (`e^-40 ~ 4e-18`).
const KERNEL_CUTOFF: f64 = 40.0;

/// Uniform nodes `lo + i (hi - lo) / (n - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, n_points: usize) -> Result<Self> {
        if n_points < 2 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!("bad grid [{lo}, {hi}] with {n_points} nodes")));
        }
        Ok(Self { lo, hi, n_points })
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n_points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points).map(|i| self.node(i))
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.n_points {
            0.5 * self.step()
        } else {
            self.step()
        }
    }

    fn centered(mean: f64, sd: f64, params: &GridParams) -> Result<Self> {
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::InvalidParameter(format!("cannot place a grid for standard deviation {sd}")));
        }
        Self::new(mean - params.half_width * sd, mean + params.half_width * sd, params.n_points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridParams {
    pub n_points: usize,
    /// Grid half-width in standard deviations.
    pub half_width: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self { n_points: 4001, half_width: 10.0 }
    }
}

/// A density tabulated on a [`GridAxis`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    axis: GridAxis,
    values: Vec<f64>,
    /// Fraction of mass lost off the grid by the operation that produced it.
    pub off_grid_mass: f64,
}

impl GridDensity {
    pub fn new(axis: GridAxis, values: Vec<f64>) -> Result<Self> {
        if values.len() != axis.n_points {
            return Err(Error::DimensionMismatch { what: "grid values", expected: axis.n_points, found: values.len() });
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("grid density values must be finite and nonnegative".into()));
        }
        Ok(Self { axis, values, off_grid_mass: 0.0 })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(axis: GridAxis, f: F) -> Result<Self> {
        Self::new(axis, axis.nodes().map(f).collect())
    }

    /// `N(mean, var)` tabulated on `[mean - w sd, mean + w sd]` and normalized.
    pub fn gaussian(mean: f64, var: f64, params: &GridParams) -> Result<Self> {
        let axis = GridAxis::centered(mean, var.sqrt(), params)?;
        Self::gaussian_on(axis, mean, var)
    }

    pub fn gaussian_on(axis: GridAxis, mean: f64, var: f64) -> Result<Self> {
        let c = 1.0 / (2.0 * PI * var).sqrt();
        Self::from_fn(axis, |x| c * (-0.5 * (x - mean).powi(2) / var).exp())?.normalized()
    }

    pub fn axis(&self) -> &GridAxis {
        &self.axis
    }

    pub fn n_points(&self) -> usize {
        self.axis.n_points
    }

    pub fn lo(&self) -> f64 {
        self.axis.lo
    }

    pub fn hi(&self) -> f64 {
        self.axis.hi
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Trapezoid rule for `int f(x) p(x) dx`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.values.iter().enumerate().map(|(i, v)| self.axis.weight(i) * v * f(self.axis.node(i))).sum()
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().enumerate().map(|(i, v)| self.axis.weight(i) * v).sum()
    }

    pub fn normalized(mut self) -> Result<Self> {
        let z = self.integral();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::InvalidParameter(format!("cannot normalize grid density with integral {z}")));
        }
        for v in &mut self.values {
            *v /= z;
        }
        Ok(self)
    }

    pub fn mean(&self) -> f64 {
        self.integrate(|x| x) / self.integral()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.integrate(|x| (x - m).powi(2)) / self.integral()
    }

    /// `int |p - q|` on a shared grid.
    pub fn l1_distance(&self, other: &GridDensity) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .enumerate()
            .map(|(i, (a, b))| self.axis.weight(i) * (a - b).abs())
            .sum())
    }

    pub(crate) fn check_same_grid(&self, other: &GridDensity) -> Result<()> {
        if self.axis != other.axis {
            return Err(Error::GridMismatch("densities live on different grids"));
        }
        Ok(())
    }

    /// Moves the density onto `axis` (monotone cubic) and renormalizes.
    pub fn resampled(&self, axis: GridAxis) -> Result<GridDensity> {
        let values = pchip_resample(self.axis.lo, self.axis.hi, &self.values, axis.lo, axis.hi, axis.n_points);
        let raw = GridDensity::new(axis, values)?;
        let kept = raw.integral() / self.integral();
        let mut out = raw.normalized()?;
        out.off_grid_mass = (1.0 - kept).max(0.0);
        Ok(out)
    }

    /// `node,value` CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,value\n");
        for (x, v) in self.axis.nodes().zip(&self.values) {
            writeln!(s, "{x},{v}").expect("string write");
        }
        s
    }

    fn is_normalized(&self) -> bool {
        (self.integral() - 1.0).abs() <= NORMALIZATION_TOLERANCE
    }
}

impl GaussianProject for GridDensity {
    fn gaussian_project(&self) -> Result<GaussianProjection> {
        projection_from_moments(DVector::from_element(1, self.mean()), DMatrix::from_element(1, 1, self.variance()))
    }
}

fn require_scalar(model: &StateSpaceModel) -> Result<()> {
    model.ensure_filterable()?;
    if model.state_dim() != 1 || model.obs_dim() != 1 {
        return Err(Error::UnsupportedModel(format!(
            "grid filter needs d = K = 1, {} has d = {}, K = {}",
            model.name(),
            model.state_dim(),
            model.obs_dim()
        )));
    }
    Ok(())
}

/// Unnormalized `P p` at the nodes of `out`:
/// `sum_j w_j p(x_j) N(u_i; Psi(x_j), Sigma)` with trapezoid weights `w_j`.
/// Linear in `p`.
pub fn apply_transition(p: &GridDensity, model: &StateSpaceModel, out: &GridAxis) -> Result<Vec<f64>> {
    require_scalar(model)?;
    let sigma2 = model.sigma()[(0, 0)];
    let norm = 1.0 / (2.0 * PI * sigma2).sqrt();
    let mut atoms: Vec<(f64, f64)> = (0..p.n_points())
        .filter(|&j| p.values[j] > 0.0)
        .map(|j| (model.psi().apply_scalar(p.axis.node(j)), p.axis.weight(j) * p.values[j]))
        .collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let reach = (2.0 * KERNEL_CUTOFF * sigma2).sqrt();
    let inv = 0.5 / sigma2;
    Ok(par::map_range(out.n_points, |i| {
        let u = out.node(i);
        let start = atoms.partition_point(|a| a.0 < u - reach);
        let mut acc = 0.0;
        for &(centre, mass) in &atoms[start..] {
            if centre > u + reach {
                break;
            }
            acc += mass * (-(u - centre).powi(2) * inv).exp();
        }
        norm * acc
    }))
}

/// Prediction `P p` on a grid of `params.n_points` nodes placed at the
/// predicted mean +- `half_width` predicted standard deviations.
pub fn grid_predict_with(p: &GridDensity, model: &StateSpaceModel, params: &GridParams) -> Result<GridDensity> {
    require_scalar(model)?;
    let mass = p.integral();
    let mean = p.integrate(|x| model.psi().apply_scalar(x)) / mass;
    let spread = p.integrate(|x| (model.psi().apply_scalar(x) - mean).powi(2)) / mass;
    let var = spread + model.sigma()[(0, 0)];
    let axis = GridAxis::centered(mean, var.sqrt(), params)?;
    let raw = GridDensity::new(axis, apply_transition(p, model, &axis)?)?;
    let lost = (1.0 - raw.integral() / mass).max(0.0);
    if lost > OFF_GRID_TOLERANCE {
        return Err(Error::DomainTooSmall { lost_mass: lost });
    }
    let mut out = raw.normalized()?;
    out.off_grid_mass = lost;
    Ok(out)
}

/// [`grid_predict_with`] using the input's node count and a 10-sd half-width.
pub fn grid_predict(p: &GridDensity, model: &StateSpaceModel) -> Result<GridDensity> {
    grid_predict_with(p, model, &GridParams { n_points: p.n_points(), half_width: GridParams::default().half_width })
}

/// Bayes update `B(Q p; y)` on the grid of `p`.
pub fn grid_update(p: &GridDensity, y: f64, model: &StateSpaceModel) -> Result<GridDensity> {
    require_scalar(model)?;
    let inv = 0.5 / model.gamma()[(0, 0)];
    let values: Vec<f64> = p
        .axis
        .nodes()
        .zip(&p.values)
        .map(|(u, v)| v * (-(y - model.h().apply_scalar(u)).powi(2) * inv).exp())
        .collect();
    let raw = GridDensity::new(p.axis, values)?;
    if raw.integral() < LIKELIHOOD_FLOOR {
        return Err(Error::LikelihoodUnderflow);
    }
    raw.normalized()
}

/// The true filter `mu_0..mu_N` for a scalar problem.
pub fn grid_filter(model: &StateSpaceModel, data: &DataRecord, params: &GridParams) -> Result<Vec<GridDensity>> {
    require_scalar(model)?;
    let init = model.init();
    let mut out = Vec::with_capacity(data.horizon() + 1);
    out.push(GridDensity::gaussian(init.mean()[0], init.cov()[(0, 0)], params)?);
    for y in &data.observations {
        let prior = grid_predict_with(out.last().expect("nonempty"), model, params)?;
        let post = grid_update(&prior, y[0], model)?;
        let axis = GridAxis::centered(post.mean(), post.variance().sqrt(), params)?;
        let moved = post.resampled(axis)?;
        if moved.off_grid_mass > OFF_GRID_TOLERANCE {
            return Err(Error::DomainTooSmall { lost_mass: moved.off_grid_mass });
        }
        debug_assert!(moved.is_normalized());
        out.push(moved);
    }
    Ok(out)
}

/// A density on a tensor grid over `(u, y)`, stored u-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGridDensity {
    u: GridAxis,
    y: GridAxis,
    values: Vec<f64>,
}

impl JointGridDensity {
    pub fn new(u: GridAxis, y: GridAxis, values: Vec<f64>) -> Result<Self> {
        if values.len() != u.n_points * y.n_points {
            return Err(Error::DimensionMismatch {
                what: "joint grid values",
                expected: u.n_points * y.n_points,
                found: values.len(),
            });
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter("joint density values must be finite and nonnegative".into()));
        }
        Ok(Self { u, y, values })
    }

    pub fn from_fn<F: Fn(f64, f64) -> f64 + Sync + Send>(u: GridAxis, y: GridAxis, f: F) -> Result<Self> {
        let rows = par::map_range(u.n_points, |i| {
            let ui = u.node(i);
            y.nodes().map(|yk| f(ui, yk)).collect::<Vec<f64>>()
        });
        Self::new(u, y, rows.concat())
    }

    /// A Gaussian measure on `R^2` tabulated on the given axes (not renormalized).
    pub fn from_gaussian(u: GridAxis, y: GridAxis, g: &GaussianMeasure) -> Result<Self> {
        if g.dim() != 2 {
            return Err(Error::DimensionMismatch { what: "joint gaussian", expected: 2, found: g.dim() });
        }
        if g.is_degenerate() {
            return Err(Error::SingularCovariance("joint gaussian has no density"));
        }
        Self::from_fn(u, y, |a, b| g.density(&DVector::from_vec(vec![a, b])).unwrap_or(0.0))
    }

    pub fn axes(&self) -> (&GridAxis, &GridAxis) {
        (&self.u, &self.y)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.y.n_points + k]
    }

    pub fn weight(&self, i: usize, k: usize) -> f64 {
        self.u.weight(i) * self.y.weight(k)
    }

    pub fn integrate<F: Fn(f64, f64) -> f64>(&self, f: F) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.u.n_points {
            let ui = self.u.node(i);
            let mut row = 0.0;
            for k in 0..self.y.n_points {
                row += self.y.weight(k) * self.value(i, k) * f(ui, self.y.node(k));
            }
            acc += self.u.weight(i) * row;
        }
        acc
    }

    pub fn integral(&self) -> f64 {
        self.integrate(|_, _| 1.0)
    }

    pub fn normalized(mut self) -> Result<Self> {
        let z = self.integral();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::InvalidParameter(format!("cannot normalize joint density with integral {z}")));
        }
        for v in &mut self.values {
            *v /= z;
        }
        Ok(self)
    }

    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let z = self.integral();
        let mu = self.integrate(|u, _| u) / z;
        let my = self.integrate(|_, y| y) / z;
        let cuu = self.integrate(|u, _| (u - mu).powi(2)) / z;
        let cyy = self.integrate(|_, y| (y - my).powi(2)) / z;
        let cuy = self.integrate(|u, y| (u - mu) * (y - my)) / z;
        (DVector::from_vec(vec![mu, my]), DMatrix::from_row_slice(2, 2, &[cuu, cuy, cuy, cyy]))
    }

    pub(crate) fn check_same_grid(&self, other: &JointGridDensity) -> Result<()> {
        if self.u != other.u || self.y != other.y {
            return Err(Error::GridMismatch("joint densities live on different grids"));
        }
        Ok(())
    }
}

impl GaussianProject for JointGridDensity {
    fn gaussian_project(&self) -> Result<GaussianProjection> {
        let (mean, cov) = self.moments();
        projection_from_moments(mean, cov)
    }
}
