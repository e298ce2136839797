//! State-space filtering problems `v' = Psi(v) + xi`, `y' = h(v') + eta`, their
//! forward simulation, and the built-in problem suite.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::GaussianMeasure;
use crate::rng::RngStream;

type MapFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Deterministic part of the dynamics or of the observation operator.
#[derive(Clone)]
pub enum VectorMap {
    Linear(DMatrix<f64>),
    Constant { input_dim: usize, value: DVector<f64> },
    /// `alpha * sin(v)` componentwise.
    ScaledSin { dim: usize, alpha: f64 },
    /// `beta * tanh(v)` componentwise.
    ScaledTanh { dim: usize, beta: f64 },
    /// `a * v + theta * sin(v)` componentwise.
    SinPerturbedLinear { dim: usize, a: f64, theta: f64 },
    /// `v + theta * tanh(v)` componentwise.
    TanhPerturbedIdentity { dim: usize, theta: f64 },
    Custom { input_dim: usize, output_dim: usize, f: Arc<MapFn> },
}

impl fmt::Debug for VectorMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VectorMap::Linear(a) => write!(f, "Linear({}x{})", a.nrows(), a.ncols()),
            VectorMap::Constant { value, .. } => write!(f, "Constant({:?})", value.as_slice()),
            VectorMap::ScaledSin { alpha, .. } => write!(f, "ScaledSin({alpha})"),
            VectorMap::ScaledTanh { beta, .. } => write!(f, "ScaledTanh({beta})"),
            VectorMap::SinPerturbedLinear { a, theta, .. } => write!(f, "SinPerturbedLinear({a}, {theta})"),
            VectorMap::TanhPerturbedIdentity { theta, .. } => write!(f, "TanhPerturbedIdentity({theta})"),
            VectorMap::Custom { input_dim, output_dim, .. } => write!(f, "Custom({input_dim}->{output_dim})"),
        }
    }
}

impl VectorMap {
    pub fn identity(dim: usize) -> Self {
        VectorMap::Linear(DMatrix::identity(dim, dim))
    }

    pub fn custom<F>(input_dim: usize, output_dim: usize, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        VectorMap::Custom { input_dim, output_dim, f: Arc::new(f) }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            VectorMap::Linear(a) => a.ncols(),
            VectorMap::Constant { input_dim, .. } => *input_dim,
            VectorMap::ScaledSin { dim, .. }
            | VectorMap::ScaledTanh { dim, .. }
            | VectorMap::SinPerturbedLinear { dim, .. }
            | VectorMap::TanhPerturbedIdentity { dim, .. } => *dim,
            VectorMap::Custom { input_dim, .. } => *input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            VectorMap::Linear(a) => a.nrows(),
            VectorMap::Constant { value, .. } => value.len(),
            VectorMap::Custom { output_dim, .. } => *output_dim,
            _ => self.input_dim(),
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            VectorMap::Linear(a) => a * v,
            VectorMap::Constant { value, .. } => value.clone(),
            VectorMap::ScaledSin { alpha, .. } => v.map(|x| alpha * x.sin()),
            VectorMap::ScaledTanh { beta, .. } => v.map(|x| beta * x.tanh()),
            VectorMap::SinPerturbedLinear { a, theta, .. } => v.map(|x| a * x + theta * x.sin()),
            VectorMap::TanhPerturbedIdentity { theta, .. } => v.map(|x| x + theta * x.tanh()),
            VectorMap::Custom { f, .. } => f(v),
        }
    }

    /// Scalar evaluation for one-dimensional maps, used by the grid filter.
    pub fn apply_scalar(&self, x: f64) -> f64 {
        match self {
            VectorMap::Linear(a) => a[(0, 0)] * x,
            VectorMap::Constant { value, .. } => value[0],
            VectorMap::ScaledSin { alpha, .. } => alpha * x.sin(),
            VectorMap::ScaledTanh { beta, .. } => beta * x.tanh(),
            VectorMap::SinPerturbedLinear { a, theta, .. } => a * x + theta * x.sin(),
            VectorMap::TanhPerturbedIdentity { theta, .. } => x + theta * x.tanh(),
            VectorMap::Custom { f, .. } => f(&DVector::from_element(1, x))[0],
        }
    }

    pub fn as_linear(&self) -> Option<&DMatrix<f64>> {
        match self {
            VectorMap::Linear(a) => Some(a),
            _ => None,
        }
    }

    /// `sup_v |map(v)|` (max norm), when finite and known in closed form.
    pub fn sup_norm(&self) -> Option<f64> {
        match self {
            VectorMap::Constant { value, .. } => Some(value.amax()),
            VectorMap::ScaledSin { alpha, .. } => Some(alpha.abs()),
            VectorMap::ScaledTanh { beta, .. } => Some(beta.abs()),
            VectorMap::Linear(a) if a.iter().all(|x| *x == 0.0) => Some(0.0),
            _ => None,
        }
    }

    /// Lipschitz constant (max-norm, componentwise maps), when known.
    pub fn lipschitz(&self) -> Option<f64> {
        match self {
            VectorMap::Linear(a) => Some(a.norm()),
            VectorMap::Constant { .. } => Some(0.0),
            VectorMap::ScaledSin { alpha, .. } => Some(alpha.abs()),
            VectorMap::ScaledTanh { beta, .. } => Some(beta.abs()),
            VectorMap::SinPerturbedLinear { a, theta, .. } => Some(a.abs() + theta.abs()),
            VectorMap::TanhPerturbedIdentity { theta, .. } => Some(1.0 + theta.abs()),
            VectorMap::Custom { .. } => None,
        }
    }
}

/// One filtering problem: dynamics, observation operator, noise covariances,
/// and the law of the initial state.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    name: String,
    psi: VectorMap,
    h: VectorMap,
    state_noise: GaussianMeasure,
    obs_noise: GaussianMeasure,
    gamma_cholesky: Cholesky<f64, Dyn>,
    init: GaussianMeasure,
    state_noise_free: bool,
    obs_noise_free: bool,
}

impl StateSpaceModel {
    pub fn new(
        name: impl Into<String>,
        psi: VectorMap,
        h: VectorMap,
        sigma: DMatrix<f64>,
        gamma: DMatrix<f64>,
        init: GaussianMeasure,
    ) -> Result<Self> {
        let d = init.dim();
        for (what, found) in [
            ("psi input", psi.input_dim()),
            ("psi output", psi.output_dim()),
            ("h input", h.input_dim()),
            ("sigma", sigma.nrows()),
        ] {
            if found != d {
                return Err(Error::DimensionMismatch { what, expected: d, found });
            }
        }
        let k = h.output_dim();
        if gamma.nrows() != k || gamma.ncols() != k {
            return Err(Error::DimensionMismatch { what: "gamma", expected: k, found: gamma.nrows() });
        }
        if Cholesky::new(sigma.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("Sigma"));
        }
        let gamma_cholesky = Cholesky::new(gamma.clone()).ok_or(Error::NotPositiveDefinite("Gamma"))?;
        Ok(Self {
            name: name.into(),
            psi,
            h,
            state_noise: GaussianMeasure::new(DVector::zeros(d), sigma)?,
            obs_noise: GaussianMeasure::new(DVector::zeros(k), gamma)?,
            gamma_cholesky,
            init,
            state_noise_free: false,
            obs_noise_free: false,
        })
    }

    /// Copy whose `step_state` omits `xi`. Filters refuse such models.
    pub fn without_state_noise(mut self) -> Self {
        self.state_noise_free = true;
        self
    }

    /// Copy whose `observe` omits `eta`. Filters refuse such models.
    pub fn without_obs_noise(mut self) -> Self {
        self.obs_noise_free = true;
        self
    }

    pub fn ensure_filterable(&self) -> Result<()> {
        if self.state_noise_free || self.obs_noise_free {
            Err(Error::NoiseFreeModel)
        } else {
            Ok(())
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.init.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.output_dim()
    }

    pub fn psi(&self) -> &VectorMap {
        &self.psi
    }

    pub fn h(&self) -> &VectorMap {
        &self.h
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        self.state_noise.cov()
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        self.obs_noise.cov()
    }

    pub fn state_noise(&self) -> &GaussianMeasure {
        &self.state_noise
    }

    pub fn obs_noise(&self) -> &GaussianMeasure {
        &self.obs_noise
    }

    pub fn init(&self) -> &GaussianMeasure {
        &self.init
    }

    pub fn psi_linear(&self) -> Option<&DMatrix<f64>> {
        self.psi.as_linear()
    }

    pub fn h_linear(&self) -> Option<&DMatrix<f64>> {
        self.h.as_linear()
    }

    pub fn is_linear(&self) -> bool {
        self.psi_linear().is_some() && self.h_linear().is_some()
    }

    /// `|y - h(v)|^2_Gamma`, the Mahalanobis misfit of predicted data `hv`.
    pub fn misfit(&self, y: &DVector<f64>, hv: &DVector<f64>) -> f64 {
        let r = y - hv;
        let z = self
            .gamma_cholesky
            .l_dirty()
            .solve_lower_triangular(&r)
            .expect("Gamma factor is nonsingular");
        z.norm_squared()
    }

    /// Cholesky factor of Gamma, for solves.
    pub fn gamma_cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.gamma_cholesky
    }

    fn check_state(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.state_dim() {
            return Err(Error::DimensionMismatch { what: "state", expected: self.state_dim(), found: v.len() });
        }
        Ok(())
    }
}

/// `Psi(v) + xi`, `xi ~ N(0, Sigma)`.
pub fn step_state<R: Rng + ?Sized>(model: &StateSpaceModel, v: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    model.check_state(v)?;
    let mean = model.psi.apply(v);
    Ok(if model.state_noise_free { mean } else { mean + model.state_noise.draw(rng) })
}

/// `h(v) + eta`, `eta ~ N(0, Gamma)`.
pub fn observe<R: Rng + ?Sized>(model: &StateSpaceModel, v: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    model.check_state(v)?;
    let mean = model.h.apply(v);
    Ok(if model.obs_noise_free { mean } else { mean + model.obs_noise.draw(rng) })
}

/// A simulated truth trajectory and its data.
///
/// `observations[i]` holds `y_{i+1}`, generated from `truth[i + 1]`; there is
/// no observation of the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    #[serde(with = "vectors")]
    pub truth: Vec<DVector<f64>>,
    #[serde(with = "vectors")]
    pub observations: Vec<DVector<f64>>,
    pub seed: u64,
}

impl DataRecord {
    pub fn horizon(&self) -> usize {
        self.observations.len()
    }

    /// The first `n` observations (and `n + 1` states).
    pub fn truncated(&self, n: usize) -> DataRecord {
        let n = n.min(self.horizon());
        DataRecord {
            truth: self.truth[..=n].to_vec(),
            observations: self.observations[..n].to_vec(),
            seed: self.seed,
        }
    }
}

pub(crate) mod vectors {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        Ok(rows.into_iter().map(DVector::from_vec).collect())
    }
}

/// Draws `v_0 ~ init` and runs the state/data recursion for `n_steps` steps.
///
/// Sub-streams: `0` for `v_0`, `1` for the `xi_n`, `2` for the `eta_n`.
pub fn simulate(model: &StateSpaceModel, n_steps: usize, rng: &RngStream) -> Result<DataRecord> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("simulation horizon must be at least 1".into()));
    }
    let xi = rng.child(1);
    let eta = rng.child(2);
    let mut truth = Vec::with_capacity(n_steps + 1);
    let mut observations = Vec::with_capacity(n_steps);
    truth.push(model.init.draw(&mut rng.child(0).generator()));
    for n in 0..n_steps {
        let next = step_state(model, &truth[n], &mut xi.child(n as u64).generator())?;
        observations.push(observe(model, &next, &mut eta.child(n as u64).generator())?);
        truth.push(next);
    }
    Ok(DataRecord { truth, observations, seed: rng.seed })
}

/// Parameters of the built-in problems; unused fields are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Linear coefficient of the dynamics.
    pub a: f64,
    /// Super-diagonal coupling of the `linearNd` dynamics matrix.
    pub coupling: f64,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub dim: usize,
    /// Observed coordinates for `linearNd`; defaults to `dim`.
    pub obs_dim: Option<usize>,
    /// Sigma = sigma * I.
    pub sigma: f64,
    /// Gamma = gamma * I.
    pub gamma: f64,
    pub m0: f64,
    pub c0: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            a: 0.9,
            coupling: 0.1,
            alpha: 2.5,
            beta: 2.0,
            theta: 0.0,
            dim: 1,
            obs_dim: None,
            sigma: 0.01,
            gamma: 0.01,
            m0: 0.0,
            c0: 1.0,
        }
    }
}

pub const BUILTIN_MODELS: [&str; 4] = ["linear1d", "linearNd", "sin-tanh", "interpolated"];

/// Looks up one of [`BUILTIN_MODELS`].
///
/// * `linear1d`: `Psi(v) = a v`, `h(v) = v`.
/// * `linearNd`: `Psi(v) = A v` with `A = a I + coupling * (super-diagonal)`
///   (spectral radius `|a|`), `h(v)` the first `obs_dim` coordinates.
/// * `sin-tanh`: `Psi(v) = alpha sin(v)`, `h(v) = beta tanh(v)`.
/// * `interpolated`: `Psi(v) = a v + theta sin(v)`, `h(v) = v + theta tanh(v)`;
///   at `theta = 0` this is `linear1d` and carries the linear flags.
pub fn builtin_model(name: &str, params: &ModelParams) -> Result<StateSpaceModel> {
    let p = params;
    let stable = || {
        if p.a.abs() >= 1.0 || !p.a.is_finite() {
            Err(Error::InvalidParameter(format!("{name} needs |a| < 1, got {}", p.a)))
        } else {
            Ok(())
        }
    };
    if !(p.sigma > 0.0 && p.gamma > 0.0) {
        return Err(Error::InvalidParameter("sigma and gamma must be positive".into()));
    }
    if !(p.c0 >= 0.0) {
        return Err(Error::InvalidParameter("c0 must be nonnegative".into()));
    }
    let dim = match name {
        "linear1d" | "interpolated" => 1,
        _ => p.dim,
    };
    if dim == 0 {
        return Err(Error::InvalidParameter("dim must be at least 1".into()));
    }
    let (psi, h) = match name {
        "linear1d" => {
            stable()?;
            (VectorMap::Linear(DMatrix::from_element(1, 1, p.a)), VectorMap::identity(1))
        }
        "linearNd" => {
            stable()?;
            let k = p.obs_dim.unwrap_or(dim);
            if k == 0 || k > dim {
                return Err(Error::InvalidParameter(format!("obs_dim must be in 1..={dim}")));
            }
            let a = DMatrix::from_fn(dim, dim, |i, j| {
                if i == j {
                    p.a
                } else if j == i + 1 {
                    p.coupling
                } else {
                    0.0
                }
            });
            let hm = DMatrix::from_fn(k, dim, |i, j| if i == j { 1.0 } else { 0.0 });
            (VectorMap::Linear(a), VectorMap::Linear(hm))
        }
        "sin-tanh" => (
            VectorMap::ScaledSin { dim, alpha: p.alpha },
            VectorMap::ScaledTanh { dim, beta: p.beta },
        ),
        "interpolated" => {
            stable()?;
            if !p.theta.is_finite() {
                return Err(Error::InvalidParameter("theta must be finite".into()));
            }
            if p.theta == 0.0 {
                (VectorMap::Linear(DMatrix::from_element(1, 1, p.a)), VectorMap::identity(1))
            } else {
                (
                    VectorMap::SinPerturbedLinear { dim: 1, a: p.a, theta: p.theta },
                    VectorMap::TanhPerturbedIdentity { dim: 1, theta: p.theta },
                )
            }
        }
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    let k = h.output_dim();
    StateSpaceModel::new(
        name,
        psi,
        h,
        DMatrix::identity(dim, dim) * p.sigma,
        DMatrix::identity(k, k) * p.gamma,
        GaussianMeasure::isotropic(DVector::from_element(dim, p.m0), p.c0)?,
    )
}
