//! Bootstrap particle filter: resample i.i.d. from the current weighted
//! measure, propagate through the dynamics, reweight by the likelihood.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::measures::{sample, EmpiricalMeasure};
use crate::models::{step_state, DataRecord, StateSpaceModel};
use crate::par;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct PfState {
    pub particles: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub step: usize,
}

impl PfState {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn to_measure(&self) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::weighted(self.particles.clone(), self.weights.clone())
    }

    /// Appends `step,particle,x0..x{d-1},weight` rows (no header).
    pub fn write_csv_rows(&self, out: &mut String) {
        for (j, (p, w)) in self.particles.iter().zip(&self.weights).enumerate() {
            write!(out, "{},{}", self.step, j).expect("string write");
            for x in p.iter() {
                write!(out, ",{x}").expect("string write");
            }
            writeln!(out, ",{w}").expect("string write");
        }
    }

    pub fn csv_header(dim: usize) -> String {
        let mut s = String::from("step,particle");
        for i in 0..dim {
            write!(s, ",x{i}").expect("string write");
        }
        s.push_str(",weight\n");
        s
    }
}

/// Output of one resample-and-propagate pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Predicted {
    pub particles: Vec<DVector<f64>>,
    pub ancestors: Vec<usize>,
}

/// Inverse-CDF multinomial draw against cumulative weights.
fn draw_ancestor<R: Rng + ?Sized>(cumulative: &[f64], rng: &mut R) -> usize {
    let total = *cumulative.last().expect("nonempty");
    let u = rng.random::<f64>() * total;
    cumulative.partition_point(|c| *c <= u).min(cumulative.len() - 1)
}

/// Draws `J` ancestors i.i.d. from the weights, then `Psi(v) + xi` for each.
/// Particle `j` uses the sub-stream `rng.child(j)` for both its ancestor and
/// its noise.
pub fn pf_resample_predict(s: &PfState, model: &StateSpaceModel, rng: &RngStream) -> Result<Predicted> {
    if s.is_empty() {
        return Err(Error::DegenerateEnsemble { size: 0 });
    }
    let mut cumulative = Vec::with_capacity(s.len());
    let mut acc = 0.0;
    for w in &s.weights {
        acc += w;
        cumulative.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::InvalidWeights("all weights are zero".into()));
    }
    let drawn = par::map_range(s.len(), |j| -> Result<(usize, DVector<f64>)> {
        let mut g = rng.child(j as u64).generator();
        let a = draw_ancestor(&cumulative, &mut g);
        Ok((a, step_state(model, &s.particles[a], &mut g)?))
    });
    let mut particles = Vec::with_capacity(s.len());
    let mut ancestors = Vec::with_capacity(s.len());
    for d in drawn {
        let (a, p) = d?;
        ancestors.push(a);
        particles.push(p);
    }
    Ok(Predicted { particles, ancestors })
}

/// Normalized likelihood weights `exp(-|y - h(v)|^2_Gamma / 2)`, computed in
/// log space with the maximum subtracted.
pub fn pf_weights(particles: &[DVector<f64>], y: &DVector<f64>, model: &StateSpaceModel) -> Result<Vec<f64>> {
    let logs = par::map_slice(particles, |_, v| -0.5 * model.misfit(y, &model.h().apply(v)));
    normalize_log_weights(&logs)
}

pub fn normalize_log_weights(logs: &[f64]) -> Result<Vec<f64>> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::LikelihoodUnderflow);
    }
    let raw: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Filter states `0..=N`; state 0 is an equal-weight sample of the initial law.
///
/// Sub-streams of `rng`: `0` for the initial sample, `n + 1` for step `n`.
pub fn pf_filter(model: &StateSpaceModel, data: &DataRecord, n_particles: usize, rng: &RngStream) -> Result<Vec<PfState>> {
    model.ensure_filterable()?;
    if n_particles < 2 {
        return Err(Error::InvalidParameter("particle filter needs J >= 2".into()));
    }
    let init = sample(model.init(), n_particles, &rng.child(0))?;
    let mut out = Vec::with_capacity(data.horizon() + 1);
    out.push(PfState { particles: init.into_particles(), weights: vec![1.0 / n_particles as f64; n_particles], step: 0 });
    for (n, y) in data.observations.iter().enumerate() {
        let pred = pf_resample_predict(out.last().expect("nonempty"), model, &rng.child(n as u64 + 1))?;
        let weights = pf_weights(&pred.particles, y, model)?;
        out.push(PfState { particles: pred.particles, weights, step: n + 1 });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightDiagnostics {
    /// `1 / sum w_j^2`, in `[1, J]`.
    pub ess: f64,
    pub max_weight: f64,
}

pub fn effective_sample_size(weights: &[f64]) -> WeightDiagnostics {
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    let max_weight = weights.iter().copied().fold(0.0, f64::max);
    WeightDiagnostics { ess: 1.0 / sq, max_weight }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::kalman_filter;
    use crate::measures::GaussianMeasure;
    use crate::models::{builtin_model, simulate, ModelParams, VectorMap};
    use nalgebra::{dvector, DMatrix};
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn id_model(sigma: f64) -> StateSpaceModel {
        StateSpaceModel::new(
            "id",
            VectorMap::identity(1),
            VectorMap::identity(1),
            DMatrix::from_element(1, 1, sigma),
            DMatrix::from_element(1, 1, 1.0),
            GaussianMeasure::scalar(0.0, 1.0).unwrap(),
        )
        .unwrap()
    }

    fn uniform_state(xs: &[f64]) -> PfState {
        PfState {
            particles: xs.iter().map(|x| dvector![*x]).collect(),
            weights: vec![1.0 / xs.len() as f64; xs.len()],
            step: 0,
        }
    }

    #[test]
    fn uniform_resampling_is_a_bootstrap() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let s = uniform_state(&xs);
        let pred = pf_resample_predict(&s, &id_model(1e-8), &RngStream::new(3, 0)).unwrap();
        for (p, a) in pred.particles.iter().zip(&pred.ancestors) {
            assert!((p[0] - xs[*a]).abs() < 1e-2);
        }
        let mean_multiplicity = pred.ancestors.len() as f64 / 1000.0;
        assert_eq!(mean_multiplicity, 1.0);
        let distinct = {
            let mut a = pred.ancestors.clone();
            a.sort();
            a.dedup();
            a.len()
        };
        // E[distinct] = J (1 - (1 - 1/J)^J) ~ 632
        assert!((distinct as f64 - 632.0).abs() < 60.0);
    }

    #[test]
    fn one_hot_weights_pick_first_particle() {
        let mut s = uniform_state(&[1.0, 2.0, 3.0, 4.0]);
        s.weights = vec![1.0, 0.0, 0.0, 0.0];
        let pred = pf_resample_predict(&s, &id_model(0.01), &RngStream::new(3, 0)).unwrap();
        assert!(pred.ancestors.iter().all(|a| *a == 0));
    }

    #[test]
    fn ancestor_counts_pass_chi_square() {
        // 10 groups of 1000 particles; group g has total weight prop. to g + 1.
        let j = 10_000;
        let groups = 10;
        let total: f64 = (1..=groups).map(|g| g as f64).sum();
        let weights: Vec<f64> = (0..j).map(|i| ((i / 1000) + 1) as f64 / total / 1000.0).collect();
        let s = PfState { particles: vec![dvector![0.0]; j], weights: weights.clone(), step: 0 };
        let pred = pf_resample_predict(&s, &id_model(0.01), &RngStream::new(99, 0)).unwrap();
        let mut counts = vec![0.0; groups];
        for a in &pred.ancestors {
            counts[a / 1000] += 1.0;
        }
        let stat: f64 = (0..groups)
            .map(|g| {
                let expected = j as f64 * (g + 1) as f64 / total;
                (counts[g] - expected).powi(2) / expected
            })
            .sum();
        let p = 1.0 - ChiSquared::new((groups - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.001, "chi2 {stat}, p {p}");
    }

    #[test]
    fn constant_h_gives_uniform_weights() {
        let m = StateSpaceModel::new(
            "c",
            VectorMap::identity(1),
            VectorMap::Constant { input_dim: 1, value: dvector![2.0] },
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            GaussianMeasure::scalar(0.0, 1.0).unwrap(),
        )
        .unwrap();
        let ps: Vec<_> = (0..7).map(|i| dvector![i as f64]).collect();
        let w = pf_weights(&ps, &dvector![0.3], &m).unwrap();
        assert!(w.iter().all(|x| *x == w[0]));
        assert!((w[0] - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn two_particle_softmax() {
        let w = pf_weights(&[dvector![0.0], dvector![2.0]], &dvector![0.0], &id_model(1.0)).unwrap();
        assert!((w[0] - 0.8808).abs() < 1e-4);
        assert!((w[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn far_particles_do_not_underflow() {
        // Raw likelihoods are all exp(-5e5) = 0 in f64.
        let w = pf_weights(&[dvector![1000.0], dvector![1001.0]], &dvector![0.0], &id_model(1.0)).unwrap();
        assert!(w[0] > 0.99);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infinite_misfit_is_an_underflow_error() {
        assert!(matches!(normalize_log_weights(&[f64::NEG_INFINITY; 3]), Err(Error::LikelihoodUnderflow)));
    }

    #[test]
    fn shift_of_log_weights_changes_nothing() {
        let logs = [-1.0, -3.0, 0.5, -0.2];
        let shifted: Vec<f64> = logs.iter().map(|l| l - 123.0).collect();
        let (a, b) = (normalize_log_weights(&logs).unwrap(), normalize_log_weights(&shifted).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_horizon_is_initial_sample() {
        let m = builtin_model("linear1d", &ModelParams::default()).unwrap();
        let data = simulate(&m, 2, &RngStream::new(1, 0)).unwrap().truncated(0);
        let out = pf_filter(&m, &data, 50, &RngStream::new(2, 0)).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].weights.iter().all(|w| *w == 0.02));
    }

    #[test]
    fn tracks_kalman_on_linear1d() {
        let m = builtin_model("linear1d", &ModelParams::default()).unwrap();
        let data = simulate(&m, 10, &RngStream::new(5, 0)).unwrap();
        let kal = kalman_filter(&m, &data).unwrap();
        let j = 10_000;
        let pf = pf_filter(&m, &data, j, &RngStream::new(6, 0)).unwrap();
        for (s, k) in pf.iter().zip(&kal) {
            let mean = s.to_measure().unwrap().mean()[0];
            let band = 4.0 * k.cov[(0, 0)].sqrt() / (j as f64).sqrt() * 3.0;
            assert!((mean - k.mean[0]).abs() < band, "step {}: {mean} vs {}", s.step, k.mean[0]);
        }
    }

    #[test]
    fn reproducible_for_fixed_seed() {
        let m = builtin_model("linear1d", &ModelParams::default()).unwrap();
        let data = simulate(&m, 5, &RngStream::new(5, 0)).unwrap();
        let a = pf_filter(&m, &data, 200, &RngStream::new(8, 1)).unwrap();
        let b = pf_filter(&m, &data, 200, &RngStream::new(8, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_rows() {
        let s = uniform_state(&[1.5, 2.5]);
        let mut out = PfState::csv_header(1);
        s.write_csv_rows(&mut out);
        assert_eq!(out, "step,particle,x0,weight\n0,0,1.5,0.5\n0,1,2.5,0.5\n");
    }

    #[test]
    fn ess_examples() {
        let d = effective_sample_size(&[0.01; 100]);
        assert!((d.ess - 100.0).abs() < 1e-9);
        let d = effective_sample_size(&[0.0, 1.0, 0.0]);
        assert_eq!((d.ess, d.max_weight), (1.0, 1.0));
        assert_eq!(effective_sample_size(&[0.5, 0.5, 0.0, 0.0]).ess, 2.0);
    }

    proptest! {
        #[test]
        fn weights_are_normalized_and_ess_bounded(
            xs in proptest::collection::vec(-30.0f64..30.0, 2..60),
            y in -5.0f64..5.0,
        ) {
            let ps: Vec<_> = xs.iter().map(|x| dvector![*x]).collect();
            let w = pf_weights(&ps, &dvector![y], &id_model(1.0)).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            let ess = effective_sample_size(&w).ess;
            prop_assert!(ess >= 1.0 - 1e-12 && ess <= xs.len() as f64 + 1e-9);
        }
    }
}
