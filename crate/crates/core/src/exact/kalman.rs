use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{symmetrize, GaussianMeasure};
use crate::models::{DataRecord, StateSpaceModel};

/// Mean and covariance of a Gaussian filtering distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl KalmanState {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    pub fn from_gaussian(g: &GaussianMeasure) -> Self {
        Self { mean: g.mean().clone(), cov: g.cov().clone() }
    }

    pub fn to_gaussian(&self) -> Result<GaussianMeasure> {
        GaussianMeasure::new(self.mean.clone(), self.cov.clone())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn checked(self) -> Result<Self> {
        if Cholesky::new(self.cov.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("Kalman covariance"));
        }
        Ok(self)
    }
}

fn linear_psi(model: &StateSpaceModel) -> Result<&DMatrix<f64>> {
    model
        .psi_linear()
        .ok_or_else(|| Error::UnsupportedModel(format!("{}: dynamics are not linear", model.name())))
}

fn linear_h(model: &StateSpaceModel) -> Result<&DMatrix<f64>> {
    model
        .h_linear()
        .ok_or_else(|| Error::UnsupportedModel(format!("{}: observation operator is not linear", model.name())))
}

/// `(A m, A C A^T + Sigma)`.
pub fn kalman_predict(s: &KalmanState, model: &StateSpaceModel) -> Result<KalmanState> {
    model.ensure_filterable()?;
    let a = linear_psi(model)?;
    if s.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch { what: "Kalman state", expected: model.state_dim(), found: s.dim() });
    }
    let cov = symmetrize(&(a * &s.cov * a.transpose() + model.sigma()));
    KalmanState::new(a * &s.mean, cov).checked()
}

/// Conditions a Gaussian prior on `y = H v + eta`.
pub fn kalman_update(s: &KalmanState, y: &DVector<f64>, model: &StateSpaceModel) -> Result<KalmanState> {
    model.ensure_filterable()?;
    let h = linear_h(model)?;
    if y.len() != model.obs_dim() {
        return Err(Error::DimensionMismatch { what: "observation", expected: model.obs_dim(), found: y.len() });
    }
    let hc = h * &s.cov;
    let innovation_cov = symmetrize(&(&hc * h.transpose() + model.gamma()));
    let chol = Cholesky::new(innovation_cov).ok_or(Error::SingularCovariance("innovation covariance"))?;
    // gain^T = S^{-1} H C
    let gain = chol.solve(&hc).transpose();
    let mean = &s.mean + &gain * (y - h * &s.mean);
    let d = s.dim();
    let cov = symmetrize(&((DMatrix::identity(d, d) - &gain * h) * &s.cov));
    KalmanState::new(mean, cov).checked()
}

/// Filtering distributions `mu_0..mu_N`.
pub fn kalman_filter(model: &StateSpaceModel, data: &DataRecord) -> Result<Vec<KalmanState>> {
    let mut out = Vec::with_capacity(data.horizon() + 1);
    out.push(KalmanState::from_gaussian(model.init()));
    for y in &data.observations {
        let prior = kalman_predict(out.last().expect("nonempty"), model)?;
        out.push(kalman_update(&prior, y, model)?);
    }
    Ok(out)
}
