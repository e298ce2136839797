//! Distances between filters.
//!
//! * Weighted total variation `d_g(mu, nu) = sup_{|f| <= g} |mu[f] - nu[f]|`
//!   with `g(v) = 1 + |v|^2`. Between two tabulated densities this equals
//!   `int g |p - q|` (take `f = g sign(p - q)`), which [`dg_exact_grid`]
//!   computes by quadrature; elsewhere [`dg_dictionary`] gives a lower bound
//!   by restricting the sup to a finite [`TestDictionary`].
//! * The random-measure metric `d(mu, nu)^2 = sup_{|f| <= 1} E|mu[f] - nu[f]|^2`,
//!   estimated from replicate runs by [`d_random_estimate`] (again a
//!   dictionary lower bound).
//! * The Gaussian-mismatch functional `eps = max_n d_g(G Q P mu_n, Q P mu_n)`
//!   for scalar problems, by [`epsilon_estimate`] on a 2D grid.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{apply_transition, GridAxis, GridDensity, JointGridDensity, KalmanState, OFF_GRID_TOLERANCE};
use crate::measures::{gaussian_project, EmpiricalMeasure, GaussianMeasure};
use crate::models::StateSpaceModel;
use crate::par;
use crate::rng::RngStream;

/// The weight `g(v) = 1 + |v|^2`.
pub fn weight(v: &DVector<f64>) -> f64 {
    1.0 + v.norm_squared()
}

type CustomFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;

#[derive(Clone)]
pub enum TestFunction {
    Constant(f64),
    Coordinate(usize),
    Square(usize),
    /// `v_i v_j`, `i != j`.
    Product(usize, usize),
    /// `tanh(a (v_i - b))`.
    Tanh { coord: usize, slope: f64, shift: f64 },
    /// `g(v) tanh(a (v_i - b))`.
    WeightedTanh { coord: usize, slope: f64, shift: f64 },
    Custom { label: String, f: Arc<CustomFn> },
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl TestFunction {
    pub fn custom<F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static>(label: impl Into<String>, f: F) -> Self {
        TestFunction::Custom { label: label.into(), f: Arc::new(f) }
    }

    pub fn label(&self) -> String {
        match self {
            TestFunction::Constant(c) => format!("{c}"),
            TestFunction::Coordinate(i) => format!("v{i}"),
            TestFunction::Square(i) => format!("v{i}^2"),
            TestFunction::Product(i, j) => format!("v{i}*v{j}"),
            TestFunction::Tanh { coord, slope, shift } => format!("tanh({slope}*(v{coord}-{shift}))"),
            TestFunction::WeightedTanh { coord, slope, shift } => format!("g*tanh({slope}*(v{coord}-{shift}))"),
            TestFunction::Custom { label, .. } => label.clone(),
        }
    }

    pub fn eval(&self, v: &DVector<f64>) -> f64 {
        match self {
            TestFunction::Constant(c) => *c,
            TestFunction::Coordinate(i) => v[*i],
            TestFunction::Square(i) => v[*i] * v[*i],
            TestFunction::Product(i, j) => v[*i] * v[*j],
            TestFunction::Tanh { coord, slope, shift } => (slope * (v[*coord] - shift)).tanh(),
            TestFunction::WeightedTanh { coord, slope, shift } => weight(v) * (slope * (v[*coord] - shift)).tanh(),
            TestFunction::Custom { f, .. } => f(v),
        }
    }

    /// Largest coordinate index read, if known.
    fn max_coord(&self) -> Option<usize> {
        match self {
            TestFunction::Constant(_) | TestFunction::Custom { .. } => None,
            TestFunction::Coordinate(i) | TestFunction::Square(i) => Some(*i),
            TestFunction::Product(i, j) => Some((*i).max(*j)),
            TestFunction::Tanh { coord, .. } | TestFunction::WeightedTanh { coord, .. } => Some(*coord),
        }
    }

    /// `E f(V)` for `V ~ g`, closed form for polynomials and a 1D quadrature
    /// over the relevant coordinate otherwise.
    pub fn gaussian_expectation(&self, g: &GaussianMeasure) -> Result<f64> {
        let (m, c) = (g.mean(), g.cov());
        Ok(match self {
            TestFunction::Constant(k) => *k,
            TestFunction::Coordinate(i) => m[*i],
            TestFunction::Square(i) => m[*i] * m[*i] + c[(*i, *i)],
            TestFunction::Product(i, j) => m[*i] * m[*j] + c[(*i, *j)],
            TestFunction::Tanh { coord, slope, shift } => {
                let i = *coord;
                gaussian_quadrature_1d(m[i], c[(i, i)], |x| (slope * (x - shift)).tanh())
            }
            TestFunction::WeightedTanh { coord, slope, shift } => {
                let i = *coord;
                let (mi, cii) = (m[i], c[(i, i)]);
                // E[v_k^2 | v_i = x] for the other coordinates
                let others = |x: f64| -> f64 {
                    (0..g.dim())
                        .filter(|k| *k != i)
                        .map(|k| {
                            if cii > 0.0 {
                                let beta = c[(k, i)] / cii;
                                (m[k] + beta * (x - mi)).powi(2) + c[(k, k)] - beta * c[(k, i)]
                            } else {
                                m[k] * m[k] + c[(k, k)]
                            }
                        })
                        .sum()
                };
                gaussian_quadrature_1d(mi, cii, |x| (slope * (x - shift)).tanh() * (1.0 + x * x + others(x)))
            }
            TestFunction::Custom { f, .. } => {
                if g.dim() != 1 {
                    return Err(Error::UnsupportedModel("custom test functions under a multivariate gaussian".into()));
                }
                gaussian_quadrature_1d(m[0], c[(0, 0)], |x| f(&DVector::from_element(1, x)))
            }
        })
    }
}

/// `E f(X)`, `X ~ N(mean, var)`, trapezoid rule over `mean +- 12 sd`.
fn gaussian_quadrature_1d<F: Fn(f64) -> f64>(mean: f64, var: f64, f: F) -> f64 {
    if var <= 0.0 {
        return f(mean);
    }
    let sd = var.sqrt();
    let span = 24.0 * sd;
    let n = ((span / 0.01).ceil() as usize).clamp(2000, 200_000) + 1;
    let h = span / (n - 1) as f64;
    let lo = mean - 12.0 * sd;
    let c = 1.0 / (2.0 * PI * var).sqrt();
    let mut acc = 0.0;
    for i in 0..n {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
        acc += w * c * (-0.5 * (x - mean).powi(2) / var).exp() * f(x);
    }
    acc * h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundType {
    /// `|f| <= 1`
    Tv,
    /// `|f| <= g`
    Weighted,
}

#[derive(Debug, Clone)]
pub struct TestDictionary {
    members: Vec<TestFunction>,
    bound: BoundType,
    dim: usize,
}

const BOUND_CHECK_POINTS: usize = 10_000;

impl TestDictionary {
    /// Builds the dictionary after spot-checking every member against its
    /// envelope on 10^4 pseudo-random points (here `N(0, 9 I)`).
    pub fn new(members: Vec<TestFunction>, bound: BoundType, dim: usize) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidParameter("empty test dictionary".into()));
        }
        if let Some(f) = members.iter().find(|f| f.max_coord().is_some_and(|c| c >= dim)) {
            return Err(Error::InvalidParameter(format!("{} reads beyond dimension {dim}", f.label())));
        }
        let probe = RngStream::new(0x7e57, dim as u64);
        let spread = GaussianMeasure::isotropic(DVector::zeros(dim), 9.0)?;
        for p in 0..BOUND_CHECK_POINTS {
            let v = spread.draw(&mut probe.child(p as u64).generator());
            let envelope = match bound {
                BoundType::Tv => 1.0,
                BoundType::Weighted => weight(&v),
            };
            for f in &members {
                let val = f.eval(&v);
                if !(val.abs() <= envelope * (1.0 + 1e-12)) {
                    return Err(Error::InvalidParameter(format!(
                        "test function {} violates its bound at {:?}: {val} > {envelope}",
                        f.label(),
                        v.as_slice()
                    )));
                }
            }
        }
        Ok(Self { members, bound, dim })
    }

    pub fn members(&self) -> &[TestFunction] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn bound(&self) -> BoundType {
        self.bound
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DictionaryKind {
    TvDefault,
    WeightedDefault,
}

const TANH_SLOPES: [f64; 2] = [1.0, 3.0];
const TANH_SHIFTS: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];
const STEP_SLOPE: f64 = 10.0;
const STEP_SHIFTS: [f64; 10] = [-2.25, -1.75, -1.25, -0.75, -0.25, 0.25, 0.75, 1.25, 1.75, 2.25];

/// Default dictionaries.
///
/// * `tv-default`, per coordinate: `tanh(a (v_i - b))` for `a in {1, 3}`,
///   `b in {-2, ..., 2}`, and smoothed indicators `tanh(10 (v_i - b))` at ten
///   half-integer offsets; 20 functions per coordinate.
/// * `weighted-default`: `1`, `v_i`, `v_i^2`, `v_i v_j`, and
///   `g(v) tanh(a (v_i - b))` over the same `(a, b)` grid.
pub fn make_dictionary(kind: DictionaryKind, dim: usize) -> Result<TestDictionary> {
    let mut members = Vec::new();
    match kind {
        DictionaryKind::TvDefault => {
            for coord in 0..dim {
                for &slope in &TANH_SLOPES {
                    for &shift in &TANH_SHIFTS {
                        members.push(TestFunction::Tanh { coord, slope, shift });
                    }
                }
                for &shift in &STEP_SHIFTS {
                    members.push(TestFunction::Tanh { coord, slope: STEP_SLOPE, shift });
                }
            }
            TestDictionary::new(members, BoundType::Tv, dim)
        }
        DictionaryKind::WeightedDefault => {
            members.push(TestFunction::Constant(1.0));
            for i in 0..dim {
                members.push(TestFunction::Coordinate(i));
            }
            for i in 0..dim {
                members.push(TestFunction::Square(i));
            }
            for i in 0..dim {
                for j in i + 1..dim {
                    members.push(TestFunction::Product(i, j));
                }
            }
            for coord in 0..dim {
                for &slope in &TANH_SLOPES {
                    for &shift in &TANH_SHIFTS {
                        members.push(TestFunction::WeightedTanh { coord, slope, shift });
                    }
                }
            }
            TestDictionary::new(members, BoundType::Weighted, dim)
        }
    }
}

/// Anything that can integrate a test function.
pub trait Expectation {
    fn dim(&self) -> usize;
    fn expect(&self, f: &TestFunction) -> Result<f64>;
}

impl Expectation for EmpiricalMeasure {
    fn dim(&self) -> usize {
        EmpiricalMeasure::dim(self)
    }

    fn expect(&self, f: &TestFunction) -> Result<f64> {
        Ok(self.expectation(|v| f.eval(v)))
    }
}

impl Expectation for GaussianMeasure {
    fn dim(&self) -> usize {
        GaussianMeasure::dim(self)
    }

    fn expect(&self, f: &TestFunction) -> Result<f64> {
        f.gaussian_expectation(self)
    }
}

impl Expectation for KalmanState {
    fn dim(&self) -> usize {
        KalmanState::dim(self)
    }

    fn expect(&self, f: &TestFunction) -> Result<f64> {
        f.gaussian_expectation(&GaussianMeasure::new_clipped(self.mean.clone(), self.cov.clone())?)
    }
}

impl Expectation for GridDensity {
    fn dim(&self) -> usize {
        1
    }

    fn expect(&self, f: &TestFunction) -> Result<f64> {
        Ok(self.integrate(|x| f.eval(&DVector::from_element(1, x))) / self.integral())
    }
}

impl Expectation for JointGridDensity {
    fn dim(&self) -> usize {
        2
    }

    fn expect(&self, f: &TestFunction) -> Result<f64> {
        Ok(self.integrate(|u, y| f.eval(&DVector::from_column_slice(&[u, y]))) / self.integral())
    }
}

/// All dictionary expectations under `m`, in dictionary order.
pub fn dictionary_expectations<M: Expectation + Sync + ?Sized>(m: &M, dict: &TestDictionary) -> Result<Vec<f64>> {
    if m.dim() != dict.dim() {
        return Err(Error::DimensionMismatch { what: "dictionary", expected: dict.dim(), found: m.dim() });
    }
    par::map_slice(dict.members(), |_, f| m.expect(f)).into_iter().collect()
}

/// Tabulated densities on which `int g |p - q|` can be evaluated.
pub trait WeightedTvGrid {
    fn dg_exact_grid(&self, other: &Self) -> Result<f64>;
}

impl WeightedTvGrid for GridDensity {
    fn dg_exact_grid(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        let axis = *self.axis();
        Ok((0..axis.n_points)
            .map(|i| {
                let x = axis.node(i);
                axis.weight(i) * (1.0 + x * x) * (self.values()[i] - other.values()[i]).abs()
            })
            .sum())
    }
}

impl WeightedTvGrid for JointGridDensity {
    fn dg_exact_grid(&self, other: &Self) -> Result<f64> {
        self.check_same_grid(other)?;
        let (u, y) = self.axes();
        let (u, y) = (*u, *y);
        let rows = par::map_range(u.n_points, |i| {
            let ui = u.node(i);
            let mut row = 0.0;
            for k in 0..y.n_points {
                let yk = y.node(k);
                row += y.weight(k) * (1.0 + ui * ui + yk * yk) * (self.value(i, k) - other.value(i, k)).abs();
            }
            u.weight(i) * row
        });
        Ok(rows.iter().sum())
    }
}

/// `int g(v) |p(v) - q(v)| dv` by trapezoid quadrature on a shared grid.
pub fn dg_exact_grid<G: WeightedTvGrid>(p: &G, q: &G) -> Result<f64> {
    p.dg_exact_grid(q)
}

/// `max_f |mu_a[f] - mu_b[f]|` over a weighted dictionary: a lower bound on `d_g`.
pub fn dg_dictionary<A, B>(a: &A, b: &B, dict: &TestDictionary) -> Result<f64>
where
    A: Expectation + Sync + ?Sized,
    B: Expectation + Sync + ?Sized,
{
    if dict.bound() != BoundType::Weighted {
        return Err(Error::InvalidParameter("d_g needs a dictionary bounded by g".into()));
    }
    let ea = dictionary_expectations(a, dict)?;
    let eb = dictionary_expectations(b, dict)?;
    Ok(ea.iter().zip(&eb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Per-step estimate of the random-measure metric against a deterministic reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DRandomEstimate {
    pub per_step: Vec<f64>,
    /// Set when only one realization was supplied, so the expectation is a
    /// single sample.
    pub single_realization: bool,
}

impl DRandomEstimate {
    pub fn sup(&self) -> f64 {
        self.per_step.iter().copied().fold(0.0, f64::max)
    }
}

/// Streaming form of [`d_random_estimate`]: feed one run at a time, keeping
/// only squared errors per (step, test function).
#[derive(Debug, Clone)]
pub struct DRandomAccumulator {
    reference: Vec<Vec<f64>>,
    sq: Vec<Vec<f64>>,
    runs: usize,
}

impl DRandomAccumulator {
    pub fn new<R: Expectation + Sync>(reference: &[R], dict: &TestDictionary) -> Result<Self> {
        if dict.bound() != BoundType::Tv {
            return Err(Error::InvalidParameter("d needs a dictionary bounded by 1".into()));
        }
        let reference = reference.iter().map(|r| dictionary_expectations(r, dict)).collect::<Result<Vec<_>>>()?;
        let sq = reference.iter().map(|r| vec![0.0; r.len()]).collect();
        Ok(Self { reference, sq, runs: 0 })
    }

    pub fn steps(&self) -> usize {
        self.reference.len()
    }

    /// One run given as dictionary expectations per step.
    pub fn add_expectations(&mut self, run: &[Vec<f64>]) -> Result<()> {
        if run.len() != self.steps() {
            return Err(Error::DimensionMismatch { what: "run length", expected: self.steps(), found: run.len() });
        }
        for ((acc, r), e) in self.sq.iter_mut().zip(&self.reference).zip(run) {
            for ((a, rv), ev) in acc.iter_mut().zip(r).zip(e) {
                *a += (ev - rv).powi(2);
            }
        }
        self.runs += 1;
        Ok(())
    }

    pub fn add_run<M: Expectation + Sync>(&mut self, run: &[M], dict: &TestDictionary) -> Result<()> {
        let e = run.iter().map(|m| dictionary_expectations(m, dict)).collect::<Result<Vec<_>>>()?;
        self.add_expectations(&e)
    }

    pub fn finish(&self) -> Result<DRandomEstimate> {
        if self.runs == 0 {
            return Err(Error::InvalidParameter("no runs supplied".into()));
        }
        let m = self.runs as f64;
        Ok(DRandomEstimate {
            per_step: self.sq.iter().map(|acc| acc.iter().map(|s| (s / m).sqrt()).fold(0.0, f64::max)).collect(),
            single_realization: self.runs == 1,
        })
    }
}

/// `max_f sqrt(1/M sum_runs |mu_run[f] - ref[f]|^2)` per step.
pub fn d_random_estimate<M, R>(runs: &[Vec<M>], reference: &[R], dict: &TestDictionary) -> Result<DRandomEstimate>
where
    M: Expectation + Sync,
    R: Expectation + Sync,
{
    let mut acc = DRandomAccumulator::new(reference, dict)?;
    for run in runs {
        acc.add_run(run, dict)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsilonGrid {
    pub n_u: usize,
    pub n_y: usize,
    /// Half-width in standard deviations of each marginal.
    pub half_width: f64,
}

impl Default for EpsilonGrid {
    fn default() -> Self {
        Self { n_u: 401, n_y: 401, half_width: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    /// `d_g(G Q P mu_n, Q P mu_n)` for `n = 0..=N`.
    pub per_step: Vec<f64>,
    pub epsilon: f64,
    pub grid: EpsilonGrid,
    /// Largest fraction of joint mass lost off a 2D grid.
    pub max_off_grid_mass: f64,
    pub source: String,
}

/// `Q P mu` tabulated on a 2D `(u, y)` grid: the prediction by quadrature,
/// the observation kernel in closed form. Normalized; returns the lost mass too.
pub fn joint_prediction(
    model: &StateSpaceModel,
    posterior: &GridDensity,
    grid: &EpsilonGrid,
) -> Result<(JointGridDensity, f64)> {
    model.ensure_filterable()?;
    if model.state_dim() != 1 || model.obs_dim() != 1 {
        return Err(Error::UnsupportedModel("epsilon estimate needs d = K = 1".into()));
    }
    let psi = |x: f64| model.psi().apply_scalar(x);
    let h = |x: f64| model.h().apply_scalar(x);
    let (sigma2, gamma2) = (model.sigma()[(0, 0)], model.gamma()[(0, 0)]);
    let m_u = posterior.integrate(psi) / posterior.integral();
    let var_u = posterior.integrate(|x| (psi(x) - m_u).powi(2)) / posterior.integral() + sigma2;
    let u_axis = GridAxis::new(
        m_u - grid.half_width * var_u.sqrt(),
        m_u + grid.half_width * var_u.sqrt(),
        grid.n_u,
    )?;
    let predicted = GridDensity::new(u_axis, apply_transition(posterior, model, &u_axis)?)?;
    let z_u = predicted.integral();
    let m_y = predicted.integrate(h) / z_u;
    let var_y = predicted.integrate(|x| (h(x) - m_y).powi(2)) / z_u + gamma2;
    let y_axis = GridAxis::new(
        m_y - grid.half_width * var_y.sqrt(),
        m_y + grid.half_width * var_y.sqrt(),
        grid.n_y,
    )?;
    let c = 1.0 / (2.0 * PI * gamma2).sqrt();
    let pv = predicted.values();
    let hu: Vec<f64> = u_axis.nodes().map(h).collect();
    let step_u = u_axis.step();
    let joint = JointGridDensity::from_fn(u_axis, y_axis, |u, y| {
        let i = ((u - u_axis.lo) / step_u).round() as usize;
        pv[i] * c * (-0.5 * (y - hu[i]).powi(2) / gamma2).exp()
    })?;
    let lost = (1.0 - joint.integral() / posterior.integral()).max(0.0);
    if lost > OFF_GRID_TOLERANCE {
        return Err(Error::DomainTooSmall { lost_mass: lost });
    }
    Ok((joint.normalized()?, lost))
}

/// Gaussian projection of a joint grid density, tabulated on the same grid.
pub fn projected_on_grid(joint: &JointGridDensity) -> Result<JointGridDensity> {
    let g = gaussian_project(joint)?.gaussian;
    let (u, y) = joint.axes();
    JointGridDensity::from_gaussian(*u, *y, &g)
}

/// The Gaussian-mismatch functional over a grid-filter output `mu_0..mu_N`.
pub fn epsilon_estimate(model: &StateSpaceModel, filtered: &[GridDensity], grid: &EpsilonGrid) -> Result<EpsilonReport> {
    let mut per_step = Vec::with_capacity(filtered.len());
    let mut max_lost: f64 = 0.0;
    for mu in filtered {
        let (joint, lost) = joint_prediction(model, mu, grid)?;
        max_lost = max_lost.max(lost);
        per_step.push(dg_exact_grid(&projected_on_grid(&joint)?, &joint)?);
    }
    let epsilon = per_step.iter().copied().fold(0.0, f64::max);
    Ok(EpsilonReport { per_step, epsilon, grid: *grid, max_off_grid_mass: max_lost, source: "grid-2d".into() })
}

/// Dictionary lower bound on each `d_g(G Q P mu_n, Q P mu_n)`, with the
/// Gaussian side integrated in closed form. `dict` must live on `(u, y)`.
pub fn epsilon_dictionary_estimate(
    model: &StateSpaceModel,
    filtered: &[GridDensity],
    grid: &EpsilonGrid,
    dict: &TestDictionary,
) -> Result<Vec<f64>> {
    filtered
        .iter()
        .map(|mu| {
            let (joint, _) = joint_prediction(model, mu, grid)?;
            let g = gaussian_project(&joint)?.gaussian;
            dg_dictionary(&g, &joint, dict)
        })
        .collect()
}
