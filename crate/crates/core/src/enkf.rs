//! The ensemble Kalman filter in perturbed-observation particle form, the
//! transport map it applies, and the closed-form mean-field recursion for
//! linear-Gaussian problems.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{kalman_predict, KalmanState};
use crate::measures::{sample, symmetrize, EmpiricalMeasure, GaussianMeasure};
use crate::models::{observe, step_state, DataRecord, StateSpaceModel};
use crate::par;
use crate::rng::RngStream;

/// Equal-weight ensemble `1/J sum_j delta_{v_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<DVector<f64>>,
    pub step: usize,
}

impl Ensemble {
    pub fn new(members: Vec<DVector<f64>>, step: usize) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::DegenerateEnsemble { size: members.len() });
        }
        Ok(Self { members, step })
    }

    pub fn members(&self) -> &[DVector<f64>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn to_measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.members.clone()).expect("ensemble is nonempty")
    }

    pub fn mean(&self) -> DVector<f64> {
        self.to_measure().mean()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.to_measure().covariance().expect("ensemble has at least two members")
    }

    pub fn csv_header(dim: usize) -> String {
        let mut s = String::from("step,member");
        for i in 0..dim {
            write!(s, ",x{i}").expect("string write");
        }
        s.push('\n');
        s
    }

    /// Appends `step,member,x0..x{d-1}` rows (no header).
    pub fn write_csv_rows(&self, out: &mut String) {
        for (j, m) in self.members.iter().enumerate() {
            write!(out, "{},{}", self.step, j).expect("string write");
            for x in m.iter() {
                write!(out, ",{x}").expect("string write");
            }
            out.push('\n');
        }
    }
}

/// Forecast pairs `(v_j, y_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEnsemble {
    states: Vec<DVector<f64>>,
    obs: Vec<DVector<f64>>,
}

impl JointEnsemble {
    pub fn new(states: Vec<DVector<f64>>, obs: Vec<DVector<f64>>) -> Result<Self> {
        if states.len() != obs.len() {
            return Err(Error::DimensionMismatch { what: "joint ensemble", expected: states.len(), found: obs.len() });
        }
        if states.len() < 2 {
            return Err(Error::DegenerateEnsemble { size: states.len() });
        }
        Ok(Self { states, obs })
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn observations(&self) -> &[DVector<f64>] {
        &self.obs
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GainVariant {
    /// Covariances of the perturbed pairs themselves, so Gamma is learned
    /// from the drawn perturbations.
    #[default]
    EmpiricalNoise,
    /// `C^{vh} (C^{hh} + Gamma)^{-1}` with the model's Gamma.
    DirectGamma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSpec {
    pub variant: GainVariant,
    /// `d x K`.
    pub gain: DMatrix<f64>,
    pub c_vy: DMatrix<f64>,
    pub c_yy: DMatrix<f64>,
}

fn ensemble_mean(xs: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(xs[0].len());
    for x in xs {
        acc += x;
    }
    acc / xs.len() as f64
}

/// Population cross-covariance `1/J sum (a_j - a)(b_j - b)^T`.
fn cross_covariance(a: &[DVector<f64>], b: &[DVector<f64>]) -> DMatrix<f64> {
    let (ma, mb) = (ensemble_mean(a), ensemble_mean(b));
    let mut acc = DMatrix::zeros(ma.len(), mb.len());
    for (x, y) in a.iter().zip(b) {
        acc.ger(1.0, &(x - &ma), &(y - &mb), 1.0);
    }
    acc / a.len() as f64
}

/// `gain = c_vy c_yy^{-1}` by a Cholesky solve.
fn solve_gain(c_vy: &DMatrix<f64>, c_yy: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(c_yy.clone()).ok_or(Error::SingularCovariance("C^yy"))?;
    Ok(chol.solve(&c_vy.transpose()).transpose())
}

fn gain_from(variant: GainVariant, c_vy: DMatrix<f64>, c_yy: DMatrix<f64>) -> Result<GainSpec> {
    let c_yy = symmetrize(&c_yy);
    let gain = solve_gain(&c_vy, &c_yy)?;
    Ok(GainSpec { variant, gain, c_vy, c_yy })
}

pub fn enkf_gain(je: &JointEnsemble, model: &StateSpaceModel, variant: GainVariant) -> Result<GainSpec> {
    match variant {
        GainVariant::EmpiricalNoise => {
            gain_from(variant, cross_covariance(&je.states, &je.obs), cross_covariance(&je.obs, &je.obs))
        }
        GainVariant::DirectGamma => {
            let hv = par::map_slice(&je.states, |_, v| model.h().apply(v));
            gain_from(variant, cross_covariance(&je.states, &hv), cross_covariance(&hv, &hv) + model.gamma())
        }
    }
}

/// Applies one common gain: `v_j = v_j + K (y - y_j)`.
pub fn enkf_analysis(
    je: &JointEnsemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    variant: GainVariant,
    step: usize,
) -> Result<(Ensemble, GainSpec)> {
    let gain = enkf_gain(je, model, variant)?;
    let members = par::map_range(je.len(), |j| &je.states[j] + &gain.gain * (y - &je.obs[j]));
    Ok((Ensemble::new(members, step)?, gain))
}

/// Forecast with caller-supplied draws `xi_j`, `eta_j`, then analysis.
pub fn enkf_step_with_noise(
    e: &Ensemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    variant: GainVariant,
    xi: &[DVector<f64>],
    eta: &[DVector<f64>],
) -> Result<Ensemble> {
    if xi.len() != e.len() || eta.len() != e.len() {
        return Err(Error::DimensionMismatch { what: "noise draws", expected: e.len(), found: xi.len().min(eta.len()) });
    }
    let states: Vec<DVector<f64>> = e.members.iter().zip(xi).map(|(v, x)| model.psi().apply(v) + x).collect();
    let obs: Vec<DVector<f64>> = states.iter().zip(eta).map(|(v, n)| model.h().apply(v) + n).collect();
    Ok(enkf_analysis(&JointEnsemble::new(states, obs)?, y, model, variant, e.step + 1)?.0)
}

/// Forecast pairs for one step; member `j` draws `xi` then `eta` from `rng.child(j)`.
pub fn enkf_forecast(e: &Ensemble, model: &StateSpaceModel, rng: &RngStream) -> Result<JointEnsemble> {
    let pairs = par::map_slice(&e.members, |j, v| -> Result<(DVector<f64>, DVector<f64>)> {
        let mut g = rng.child(j as u64).generator();
        let vhat = step_state(model, v, &mut g)?;
        let yhat = observe(model, &vhat, &mut g)?;
        Ok((vhat, yhat))
    });
    let mut states = Vec::with_capacity(e.len());
    let mut obs = Vec::with_capacity(e.len());
    for p in pairs {
        let (v, y) = p?;
        states.push(v);
        obs.push(y);
    }
    JointEnsemble::new(states, obs)
}

pub fn enkf_step(
    e: &Ensemble,
    y: &DVector<f64>,
    model: &StateSpaceModel,
    variant: GainVariant,
    rng: &RngStream,
) -> Result<Ensemble> {
    model.ensure_filterable()?;
    let je = enkf_forecast(e, model, rng)?;
    Ok(enkf_analysis(&je, y, model, variant, e.step + 1)?.0)
}

/// Ensembles `0..=N`. Sub-streams of `rng`: `0` for the initial draw, `n + 1` for step `n`.
pub fn enkf_filter(
    model: &StateSpaceModel,
    data: &DataRecord,
    n_members: usize,
    variant: GainVariant,
    rng: &RngStream,
) -> Result<Vec<Ensemble>> {
    model.ensure_filterable()?;
    let init = sample(model.init(), n_members, &rng.child(0))?;
    let mut out = Vec::with_capacity(data.horizon() + 1);
    out.push(Ensemble::new(init.into_particles(), 0)?);
    for (n, y) in data.observations.iter().enumerate() {
        let next = enkf_step(out.last().expect("nonempty"), y, model, variant, &rng.child(n as u64 + 1))?;
        out.push(next);
    }
    Ok(out)
}

/// A law on `R^d x R^K` to be transported by `(v, y) -> v + C^vy (C^yy)^{-1} (y* - y)`.
#[derive(Debug, Clone, Copy)]
pub enum JointLaw<'a> {
    Empirical(&'a JointEnsemble),
    Gaussian { law: &'a GaussianMeasure, state_dim: usize },
}

#[derive(Debug, Clone)]
pub enum Transported {
    Empirical(EmpiricalMeasure),
    Gaussian(GaussianMeasure),
}

/// Pushforward of the joint law under the affine transport map built from
/// the law's own covariance blocks.
pub fn transport_apply(law: JointLaw<'_>, y: &DVector<f64>) -> Result<Transported> {
    match law {
        JointLaw::Empirical(je) => {
            let gain = solve_gain(&cross_covariance(&je.states, &je.obs), &symmetrize(&cross_covariance(&je.obs, &je.obs)))?;
            let moved = par::map_range(je.len(), |j| &je.states[j] + &gain * (y - &je.obs[j]));
            Ok(Transported::Empirical(EmpiricalMeasure::uniform(moved)?))
        }
        JointLaw::Gaussian { law, state_dim } => {
            let d = state_dim;
            let k = law.dim().checked_sub(d).filter(|k| *k > 0).ok_or(Error::DimensionMismatch {
                what: "joint gaussian",
                expected: d + y.len(),
                found: law.dim(),
            })?;
            if y.len() != k {
                return Err(Error::DimensionMismatch { what: "observation", expected: k, found: y.len() });
            }
            let c = law.cov();
            let c_vv = c.view((0, 0), (d, d));
            let c_vy = c.view((0, d), (d, k)).into_owned();
            let c_yy = c.view((d, d), (k, k)).into_owned();
            let m_v = law.mean().rows(0, d);
            let m_y = law.mean().rows(d, k);
            let gain = solve_gain(&c_vy, &c_yy)?;
            let mean = m_v + &gain * (y - m_y);
            let cov = symmetrize(&(c_vv - &gain * c_vy.transpose()));
            Ok(Transported::Gaussian(GaussianMeasure::new(mean, cov)?))
        }
    }
}

/// Joint law of `(v, H v + eta)` for `v ~ N(m, C)`.
pub fn lift_gaussian(s: &KalmanState, model: &StateSpaceModel) -> Result<GaussianMeasure> {
    let h = model.h_linear().ok_or_else(|| Error::UnsupportedModel(format!("{}: h is not linear", model.name())))?;
    let (d, k) = (s.dim(), model.obs_dim());
    let mut mean = DVector::zeros(d + k);
    mean.rows_mut(0, d).copy_from(&s.mean);
    mean.rows_mut(d, k).copy_from(&(h * &s.mean));
    let ch = &s.cov * h.transpose();
    let mut cov = DMatrix::zeros(d + k, d + k);
    cov.view_mut((0, 0), (d, d)).copy_from(&s.cov);
    cov.view_mut((0, d), (d, k)).copy_from(&ch);
    cov.view_mut((d, 0), (k, d)).copy_from(&ch.transpose());
    cov.view_mut((d, d), (k, k)).copy_from(&(h * &ch + model.gamma()));
    GaussianMeasure::new(mean, cov)
}

/// Law of the mean-field EnKF for linear-Gaussian problems, propagated exactly:
/// Gaussian prediction, exact lift to the joint space, Gaussian transport.
pub fn mf_enkf_gaussian_filter(model: &StateSpaceModel, data: &DataRecord) -> Result<Vec<KalmanState>> {
    model.ensure_filterable()?;
    if !model.is_linear() {
        return Err(Error::UnsupportedModel(format!(
            "{}: closed-form mean-field law needs linear dynamics and observations",
            model.name()
        )));
    }
    let d = model.state_dim();
    let mut out = Vec::with_capacity(data.horizon() + 1);
    out.push(KalmanState::from_gaussian(model.init()));
    for y in &data.observations {
        let prior = kalman_predict(out.last().expect("nonempty"), model)?;
        let joint = lift_gaussian(&prior, model)?;
        match transport_apply(JointLaw::Gaussian { law: &joint, state_dim: d }, y)? {
            Transported::Gaussian(g) => out.push(KalmanState::from_gaussian(&g)),
            Transported::Empirical(_) => unreachable!("gaussian input maps to a gaussian"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{kalman_filter, kalman_update};
    use crate::models::{builtin_model, simulate, ModelParams, VectorMap};
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn scalar_model(h: VectorMap, gamma: f64) -> StateSpaceModel {
        StateSpaceModel::new(
            "t",
            VectorMap::identity(1),
            h,
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, gamma),
            GaussianMeasure::scalar(0.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn scalars(xs: &[f64]) -> Vec<DVector<f64>> {
        xs.iter().map(|x| dvector![*x]).collect()
    }

    #[test]
    fn zero_observation_operator_gives_zero_gain() {
        let m = scalar_model(VectorMap::Constant { input_dim: 1, value: dvector![0.0] }, 1.0);
        let je = JointEnsemble::new(scalars(&[0.0, 1.0, 3.0]), scalars(&[0.2, -0.1, 0.4])).unwrap();
        let g = enkf_gain(&je, &m, GainVariant::DirectGamma).unwrap();
        assert_eq!(g.c_vy[(0, 0)], 0.0);
        assert_eq!(g.c_yy[(0, 0)], 1.0);
        assert_eq!(g.gain[(0, 0)], 0.0);
    }

    #[test]
    fn constant_h_analysis_equals_forecast() {
        let m = scalar_model(VectorMap::Constant { input_dim: 1, value: dvector![1.0] }, 1.0);
        let forecast = scalars(&[0.0, 1.0, 3.0]);
        let je = JointEnsemble::new(forecast.clone(), scalars(&[1.2, 0.9, 1.4])).unwrap();
        let (a, _) = enkf_analysis(&je, &dvector![5.0], &m, GainVariant::DirectGamma, 1).unwrap();
        assert_eq!(a.members(), &forecast[..]);
    }

    #[test]
    fn hand_computed_two_member_step() {
        // forecast {0, 2}; C^vh = C^hh = 1 (population); K = 1 / (1 + 1).
        let m = scalar_model(VectorMap::identity(1), 1.0);
        let e = Ensemble::new(scalars(&[0.0, 2.0]), 0).unwrap();
        let zero = scalars(&[0.0, 0.0]);
        let a = enkf_step_with_noise(&e, &dvector![1.0], &m, GainVariant::DirectGamma, &zero, &zero).unwrap();
        for (got, want) in a.members().iter().zip([0.5, 1.5]) {
            assert!((got[0] - want).abs() < 1e-15);
        }
        assert_eq!(a.step, 1);
    }

    #[test]
    fn mean_moves_by_gain_times_mean_innovation() {
        let m = scalar_model(VectorMap::TanhPerturbedIdentity { dim: 1, theta: 0.7 }, 0.3);
        let e = Ensemble::new(
            (0..50).map(|i| dvector![(i as f64 * 0.37).sin() * 2.0]).collect(),
            0,
        )
        .unwrap();
        let je = enkf_forecast(&e, &m, &RngStream::new(1, 1)).unwrap();
        let y = dvector![0.4];
        for variant in [GainVariant::EmpiricalNoise, GainVariant::DirectGamma] {
            let (a, g) = enkf_analysis(&je, &y, &m, variant, 1).unwrap();
            let expect = ensemble_mean(je.states()) + &g.gain * (&y - ensemble_mean(je.observations()));
            assert!((a.mean() - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn gains_approach_kalman_gain() {
        // Initial law N(0, 1), a = 0.9, Sigma = Gamma = 0.01: forecast cov 0.82,
        // Kalman gain 0.82 / 0.83.
        let m = builtin_model("linear1d", &ModelParams::default()).unwrap();
        let k_kal = 0.82 / 0.83;
        for seed in 0..20 {
            let e = Ensemble::new(sample(m.init(), 100_000, &RngStream::new(seed, 0)).unwrap().into_particles(), 0)
                .unwrap();
            let je = enkf_forecast(&e, &m, &RngStream::new(seed, 1)).unwrap();
            let ge = enkf_gain(&je, &m, GainVariant::EmpiricalNoise).unwrap().gain[(0, 0)];
            let gd = enkf_gain(&je, &m, GainVariant::DirectGamma).unwrap().gain[(0, 0)];
            assert!((ge - k_kal).abs() < 0.02, "seed {seed}: {ge}");
            assert!((gd - k_kal).abs() < 0.02, "seed {seed}: {gd}");
            assert!((ge - gd).abs() < 0.02);
        }
    }

    #[test]
    fn tiny_empirical_noise_ensemble_can_be_singular() {
        let m = scalar_model(VectorMap::identity(1), 1.0);
        let je = JointEnsemble::new(scalars(&[0.0, 1.0]), scalars(&[2.0, 2.0])).unwrap();
        assert!(matches!(enkf_gain(&je, &m, GainVariant::EmpiricalNoise), Err(Error::SingularCovariance(_))));
    }

    #[test]
    fn ensemble_needs_two_members() {
        assert!(matches!(Ensemble::new(scalars(&[1.0]), 0), Err(Error::DegenerateEnsemble { size: 1 })));
    }

    #[test]
    fn zero_cross_covariance_leaves_marginal() {
        let g = GaussianMeasure::new(dvector![1.0, 2.0], DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.5])).unwrap();
        let Transported::Gaussian(out) = transport_apply(JointLaw::Gaussian { law: &g, state_dim: 1 }, &dvector![7.0]).unwrap()
        else {
            panic!("gaussian in, gaussian out")
        };
        assert_eq!(out.mean()[0], 1.0);
        assert_eq!(out.cov()[(0, 0)], 3.0);
    }

    #[test]
    fn gaussian_transport_is_conditioning() {
        let p = ModelParams { dim: 3, obs_dim: Some(2), gamma: 0.2, ..Default::default() };
        let m = builtin_model("linearNd", &p).unwrap();
        let prior = KalmanState::new(
            dvector![0.3, -1.0, 2.0],
            DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 0.7, -0.1, 0.1, -0.1, 0.5]),
        );
        let y = dvector![0.5, 0.1];
        let joint = lift_gaussian(&prior, &m).unwrap();
        let Transported::Gaussian(t) = transport_apply(JointLaw::Gaussian { law: &joint, state_dim: 3 }, &y).unwrap()
        else {
            panic!()
        };
        let b = kalman_update(&prior, &y, &m).unwrap();
        assert!((t.mean() - &b.mean).amax() < 1e-10);
        assert!((t.cov() - &b.cov).amax() < 1e-10);
    }

    #[test]
    fn empirical_transport_matches_gaussian_transport() {
        let g = GaussianMeasure::new(dvector![0.5, 1.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.5])).unwrap();
        let n = 100_000;
        let draws = sample(&g, n, &RngStream::new(12, 0)).unwrap();
        let states: Vec<_> = draws.particles().iter().map(|p| dvector![p[0]]).collect();
        let obs: Vec<_> = draws.particles().iter().map(|p| dvector![p[1]]).collect();
        let je = JointEnsemble::new(states, obs).unwrap();
        let y = dvector![2.0];
        let Transported::Empirical(e) = transport_apply(JointLaw::Empirical(&je), &y).unwrap() else { panic!() };
        let Transported::Gaussian(t) = transport_apply(JointLaw::Gaussian { law: &g, state_dim: 1 }, &y).unwrap()
        else {
            panic!()
        };
        // conditional N(0.5 + 0.4 (y - 1), 1 - 0.24) = N(0.9, 0.76)
        assert!((t.mean()[0] - 0.9).abs() < 1e-12);
        assert!((t.cov()[(0, 0)] - 0.76).abs() < 1e-12);
        let sd_mean = (0.76 / n as f64).sqrt();
        let sd_var = 0.76 * (2.0 / n as f64).sqrt();
        assert!((e.mean()[0] - 0.9).abs() < 3.0 * sd_mean);
        assert!((e.covariance().unwrap()[(0, 0)] - 0.76).abs() < 3.0 * sd_var);
    }

    #[test]
    fn mean_field_equals_kalman() {
        for p in [
            ("linear1d", ModelParams::default()),
            ("linearNd", ModelParams { dim: 4, obs_dim: Some(2), ..Default::default() }),
        ] {
            let m = builtin_model(p.0, &p.1).unwrap();
            let data = simulate(&m, 20, &RngStream::new(31, 0)).unwrap();
            let mf = mf_enkf_gaussian_filter(&m, &data).unwrap();
            let kal = kalman_filter(&m, &data).unwrap();
            for (a, b) in mf.iter().zip(&kal) {
                assert!((&a.mean - &b.mean).amax() < 1e-10);
                assert!((&a.cov - &b.cov).amax() < 1e-10);
            }
            assert_eq!(mf_enkf_gaussian_filter(&m, &data.truncated(0)).unwrap().len(), 1);
        }
    }

    #[test]
    fn mean_field_rejects_nonlinear_models() {
        let m = builtin_model("sin-tanh", &ModelParams::default()).unwrap();
        let data = simulate(&m, 2, &RngStream::new(0, 0)).unwrap();
        assert!(matches!(mf_enkf_gaussian_filter(&m, &data), Err(Error::UnsupportedModel(_))));
    }

    #[test]
    fn variants_converge_together() {
        let m = builtin_model("linear1d", &ModelParams { sigma: 0.1, gamma: 0.1, ..Default::default() }).unwrap();
        let data = simulate(&m, 5, &RngStream::new(40, 0)).unwrap();
        let gap = |j: usize| -> f64 {
            let mut total = 0.0;
            for r in 0..20 {
                let s = RngStream::new(41, r);
                let a = enkf_filter(&m, &data, j, GainVariant::EmpiricalNoise, &s).unwrap();
                let b = enkf_filter(&m, &data, j, GainVariant::DirectGamma, &s).unwrap();
                let (ea, eb) = (a.last().unwrap(), b.last().unwrap());
                total += (ea.mean() - eb.mean()).norm() + (ea.covariance() - eb.covariance()).norm();
            }
            total / 20.0
        };
        let (small, large) = (gap(100), gap(10_000));
        assert!(large < 10.0 * small, "{small} {large}");
        // O(J^-1/2) predicts a factor of 10
        assert!(large < small / 3.0, "{small} {large}");
    }

    #[test]
    fn csv_rows() {
        let e = Ensemble::new(vec![dvector![1.0, 2.0], dvector![3.0, 4.0]], 2).unwrap();
        let mut s = Ensemble::csv_header(2);
        e.write_csv_rows(&mut s);
        assert_eq!(s, "step,member,x0,x1\n2,0,1,2\n2,1,3,4\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn gain_is_permutation_invariant(
            pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..30),
            k in 0usize..30,
        ) {
            let m = scalar_model(VectorMap::ScaledTanh { dim: 1, beta: 1.5 }, 0.5);
            let (s, o): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let je = JointEnsemble::new(scalars(&s), scalars(&o)).unwrap();
            let r = k % pairs.len();
            let (mut s2, mut o2) = (s.clone(), o.clone());
            s2.rotate_left(r);
            o2.rotate_left(r);
            let je2 = JointEnsemble::new(scalars(&s2), scalars(&o2)).unwrap();
            for v in [GainVariant::EmpiricalNoise, GainVariant::DirectGamma] {
                let (a, b) = (enkf_gain(&je, &m, v), enkf_gain(&je2, &m, v));
                if let (Ok(a), Ok(b)) = (a, b) {
                    prop_assert!((a.gain - b.gain).amax() < 1e-9);
                }
            }
        }

        #[test]
        fn analysis_is_translation_equivariant(
            xs in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -1.0f64..1.0, -1.0f64..1.0), 4..20),
            d0 in -5.0f64..5.0, d1 in -5.0f64..5.0,
        ) {
            let p = ModelParams { dim: 2, obs_dim: Some(1), gamma: 0.3, ..Default::default() };
            let m = builtin_model("linearNd", &p).unwrap();
            let h = m.h_linear().unwrap().clone();
            let states: Vec<_> = xs.iter().map(|t| dvector![t.0, t.1]).collect();
            let obs: Vec<_> = states.iter().zip(&xs).map(|(v, t)| &h * v + dvector![t.2]).collect();
            let shift = dvector![d0, d1];
            let hs = &h * &shift;
            let y = dvector![0.25];
            let je = JointEnsemble::new(states.clone(), obs.clone()).unwrap();
            let je2 = JointEnsemble::new(
                states.iter().map(|v| v + &shift).collect(),
                obs.iter().map(|o| o + &hs).collect(),
            ).unwrap();
            for v in [GainVariant::EmpiricalNoise, GainVariant::DirectGamma] {
                let (a, _) = enkf_analysis(&je, &y, &m, v, 1).unwrap();
                let (b, _) = enkf_analysis(&je2, &(&y + &hs), &m, v, 1).unwrap();
                for (p, q) in a.members().iter().zip(b.members()) {
                    prop_assert!((q - p - &shift).amax() < 1e-8);
                }
            }
        }
    }
}
