//! Probability-measure types: Gaussians, weighted empirical measures, and the
//! moment-matching projection onto Gaussians.
//!
//! Covariances use the population convention `sum_j w_j (v_j - m)(v_j - m)^T`,
//! i.e. division by `J` for equal weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::par;
use crate::rng::RngStream;

/// Relative eigenvalue floor below which a covariance is rejected.
pub const PSD_TOLERANCE: f64 = 1e-10;
const DEGENERACY_TOLERANCE: f64 = 1e-12;
const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// `cov = factor * factor^T`
    factor: DMatrix<f64>,
    precision: Option<DMatrix<f64>>,
    log_det: f64,
    eig_min: f64,
    eig_max: f64,
}

impl GaussianMeasure {
    /// Builds `N(mean, cov)`. The covariance is symmetrized; eigenvalues in
    /// `[-1e-10 * max, 0)` are clipped to zero, anything more negative is an error.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::build(mean, cov, false)
    }

    /// Like [`GaussianMeasure::new`] but clips every negative eigenvalue.
    pub fn new_clipped(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::build(mean, cov, true)
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * variance)
    }

    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, variance))
    }

    fn build(mean: DVector<f64>, cov: DMatrix<f64>, clip_all: bool) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                what: "gaussian covariance",
                expected: d,
                found: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite gaussian parameters".into()));
        }
        let mut cov = symmetrize(&cov);
        let eig = cov.clone().symmetric_eigen();
        let eig_max = eig.eigenvalues.max();
        let eig_min = eig.eigenvalues.min();
        if !clip_all && eig_min < -PSD_TOLERANCE * eig_max.max(0.0) {
            return Err(Error::NotPositiveSemiDefinite { min_eig: eig_min, max_eig: eig_max });
        }
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        if eig_min < 0.0 {
            cov = symmetrize(
                &(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()),
            );
        }
        let factor = &eig.eigenvectors * DMatrix::from_diagonal(&clipped.map(f64::sqrt));
        let eig_min = eig_min.max(0.0);
        let eig_max = eig_max.max(0.0);
        let (precision, log_det) = if d > 0 && eig_min > DEGENERACY_TOLERANCE * eig_max {
            let inv = clipped.map(|l| 1.0 / l);
            (
                Some(symmetrize(
                    &(&eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()),
                )),
                clipped.iter().map(|l| l.ln()).sum(),
            )
        } else {
            (None, f64::NEG_INFINITY)
        };
        Ok(Self { mean, cov, factor, precision, log_det, eig_min, eig_max })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// A square root of the covariance (`cov = F F^T`).
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    /// True when the covariance is singular up to a relative `1e-12`.
    pub fn is_degenerate(&self) -> bool {
        self.precision.is_none()
    }

    pub fn eigenvalue_range(&self) -> (f64, f64) {
        (self.eig_min, self.eig_max)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.factor * z
    }

    /// Log-density; `None` for a degenerate covariance.
    pub fn log_density(&self, x: &DVector<f64>) -> Option<f64> {
        let precision = self.precision.as_ref()?;
        let r = x - &self.mean;
        let quad = r.dot(&(precision * &r));
        Some(-0.5 * (quad + self.log_det + self.dim() as f64 * (2.0 * std::f64::consts::PI).ln()))
    }

    pub fn density(&self, x: &DVector<f64>) -> Option<f64> {
        self.log_density(x).map(f64::exp)
    }

    /// Marginal on the coordinate block `start..start + len`.
    pub fn marginal(&self, start: usize, len: usize) -> Result<GaussianMeasure> {
        if start + len > self.dim() {
            return Err(Error::DimensionMismatch {
                what: "gaussian marginal",
                expected: self.dim(),
                found: start + len,
            });
        }
        GaussianMeasure::new_clipped(
            self.mean.rows(start, len).into_owned(),
            self.cov.view((start, start), (len, len)).into_owned(),
        )
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Particle locations with nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    particles: Vec<DVector<f64>>,
    weights: Vec<f64>,
    uniform: bool,
}

impl EmpiricalMeasure {
    /// Equal-weight measure `1/J sum_j delta_{v_j}`.
    pub fn uniform(particles: Vec<DVector<f64>>) -> Result<Self> {
        check_particles(&particles)?;
        let j = particles.len();
        Ok(Self { particles, weights: vec![1.0 / j as f64; j], uniform: true })
    }

    /// Weighted measure; weights must already sum to one within `1e-12`.
    pub fn weighted(particles: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        check_particles(&particles)?;
        if weights.len() != particles.len() {
            return Err(Error::DimensionMismatch {
                what: "empirical weights",
                expected: particles.len(),
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidWeights(format!("weights sum to {total}")));
        }
        let uniform = weights.iter().all(|w| *w == weights[0]);
        Ok(Self { particles, weights, uniform })
    }

    /// Normalizes the given nonnegative weights before building the measure.
    pub fn from_unnormalized(particles: Vec<DVector<f64>>, raw: &[f64]) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidWeights(format!("weight total {total}")));
        }
        Self::weighted(particles, raw.iter().map(|w| w / total).collect())
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn into_particles(self) -> Vec<DVector<f64>> {
        self.particles
    }

    /// `sum_j w_j f(v_j)`, in particle order.
    pub fn expectation<F: Fn(&DVector<f64>) -> f64>(&self, f: F) -> f64 {
        if self.uniform {
            self.particles.iter().map(&f).sum::<f64>() / self.len() as f64
        } else {
            self.particles.iter().zip(&self.weights).map(|(v, w)| w * f(v)).sum()
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        if self.uniform {
            for v in &self.particles {
                acc += v;
            }
            acc / self.len() as f64
        } else {
            for (v, w) in self.particles.iter().zip(&self.weights) {
                acc.axpy(*w, v, 1.0);
            }
            acc
        }
    }

    /// Population covariance about the weighted mean; needs `J >= 2`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.len() < 2 {
            return Err(Error::DegenerateEnsemble { size: self.len() });
        }
        let mean = self.mean();
        let d = self.dim();
        let mut acc = DMatrix::zeros(d, d);
        if self.uniform {
            for v in &self.particles {
                let r = v - &mean;
                acc.ger(1.0, &r, &r, 1.0);
            }
            acc /= self.len() as f64;
        } else {
            for (v, w) in self.particles.iter().zip(&self.weights) {
                let r = v - &mean;
                acc.ger(*w, &r, &r, 1.0);
            }
        }
        Ok(symmetrize(&acc))
    }
}

fn check_particles(particles: &[DVector<f64>]) -> Result<()> {
    let Some(first) = particles.first() else {
        return Err(Error::DegenerateEnsemble { size: 0 });
    };
    let d = first.len();
    if let Some(bad) = particles.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch { what: "particle", expected: d, found: bad.len() });
    }
    Ok(())
}

/// `n` i.i.d. draws from `g` as an equal-weight measure. Draw `j` uses the
/// sub-stream `rng.child(j)`.
pub fn sample(g: &GaussianMeasure, n: usize, rng: &RngStream) -> Result<EmpiricalMeasure> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample size must be at least 1".into()));
    }
    let particles = par::map_range(n, |j| g.draw(&mut rng.child(j as u64).generator()));
    EmpiricalMeasure::uniform(particles)
}

/// Weighted mean and population covariance.
pub fn empirical_moments(m: &EmpiricalMeasure) -> Result<(DVector<f64>, DMatrix<f64>)> {
    Ok((m.mean(), m.covariance()?))
}

#[derive(Debug, Clone)]
pub struct GaussianProjection {
    pub gaussian: GaussianMeasure,
    /// Set when the matched covariance is singular (after PSD clipping).
    pub degenerate: bool,
}

/// Moment matching onto `N(mean, cov)`, the KL-closest Gaussian.
pub trait GaussianProject {
    fn gaussian_project(&self) -> Result<GaussianProjection>;
}

pub fn gaussian_project<M: GaussianProject + ?Sized>(m: &M) -> Result<GaussianProjection> {
    m.gaussian_project()
}

pub(crate) fn projection_from_moments(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<GaussianProjection> {
    let gaussian = GaussianMeasure::new_clipped(mean, cov)?;
    let degenerate = gaussian.is_degenerate();
    Ok(GaussianProjection { gaussian, degenerate })
}

impl GaussianProject for EmpiricalMeasure {
    fn gaussian_project(&self) -> Result<GaussianProjection> {
        let (mean, cov) = empirical_moments(self)?;
        projection_from_moments(mean, cov)
    }
}

impl GaussianProject for GaussianMeasure {
    fn gaussian_project(&self) -> Result<GaussianProjection> {
        Ok(GaussianProjection { gaussian: self.clone(), degenerate: self.is_degenerate() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    #[test]
    fn covariance_is_symmetrized() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.3, 1.0]);
        let g = GaussianMeasure::new(DVector::zeros(2), cov).unwrap();
        assert_eq!(g.cov()[(0, 1)], g.cov()[(1, 0)]);
        assert_eq!(g.cov()[(0, 1)], 0.4);
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(matches!(
            GaussianMeasure::new(DVector::zeros(2), cov),
            Err(Error::NotPositiveSemiDefinite { .. })
        ));
    }

    #[test]
    fn rounding_noise_is_clipped() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-13]);
        let g = GaussianMeasure::new(DVector::zeros(2), cov).unwrap();
        assert!(g.cov()[(1, 1)] >= 0.0);
        assert!(g.is_degenerate());
    }

    #[test]
    fn single_draw_has_unit_weight() {
        let g = GaussianMeasure::isotropic(DVector::zeros(2), 1.0).unwrap();
        let m = sample(&g, 1, &RngStream::new(3, 0)).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.dim(), 2);
        assert_eq!(m.weights(), &[1.0]);
    }

    #[test]
    fn zero_covariance_sampling_is_deterministic() {
        let g = GaussianMeasure::scalar(5.0, 0.0).unwrap();
        let m = sample(&g, 3, &RngStream::new(3, 0)).unwrap();
        for p in m.particles() {
            assert_eq!(p[0], 5.0);
        }
    }

    #[test]
    fn zero_sample_size_is_an_error() {
        let g = GaussianMeasure::scalar(0.0, 1.0).unwrap();
        assert!(sample(&g, 0, &RngStream::new(3, 0)).is_err());
    }

    #[test]
    fn large_sample_mean_is_close() {
        // 3 sigma / sqrt(n) = 0.003 for n = 1e6
        let g = GaussianMeasure::scalar(0.0, 1.0).unwrap();
        let m = sample(&g, 1_000_000, &RngStream::new(42, 0)).unwrap();
        let mean = m.mean()[0];
        assert!(mean.abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn two_point_moments() {
        let m = EmpiricalMeasure::weighted(vec![v1(1.0), v1(3.0)], vec![0.5, 0.5]).unwrap();
        let (mean, cov) = empirical_moments(&m).unwrap();
        assert_eq!(mean[0], 2.0);
        assert_eq!(cov[(0, 0)], 1.0);
    }

    #[test]
    fn single_particle_covariance_errors() {
        let m = EmpiricalMeasure::weighted(vec![v1(7.0)], vec![1.0]).unwrap();
        assert_eq!(m.mean()[0], 7.0);
        assert!(matches!(empirical_moments(&m), Err(Error::DegenerateEnsemble { size: 1 })));
    }

    #[test]
    fn monte_carlo_moments_of_scalar_gaussian() {
        // sd(mean) = 2/100 and sd(var) = 4 * sqrt(2/1e4) ~ 0.057; bounds are ~3 sd
        let g = GaussianMeasure::scalar(1.0, 4.0).unwrap();
        let m = sample(&g, 10_000, &RngStream::new(7, 0)).unwrap();
        let (mean, cov) = empirical_moments(&m).unwrap();
        assert!((mean[0] - 1.0).abs() < 0.06);
        assert!((cov[(0, 0)] - 4.0).abs() < 0.25);
    }

    #[test]
    fn two_particle_projection() {
        let m = EmpiricalMeasure::weighted(vec![v1(0.0), v1(2.0)], vec![0.5, 0.5]).unwrap();
        let p = gaussian_project(&m).unwrap();
        assert_eq!(p.gaussian.mean()[0], 1.0);
        assert_eq!(p.gaussian.cov()[(0, 0)], 1.0);
        assert!(!p.degenerate);
    }

    #[test]
    fn collinear_particles_flag_degeneracy() {
        let m = EmpiricalMeasure::uniform(vec![dvector![0.0, 0.0], dvector![1.0, 1.0], dvector![2.0, 2.0]])
            .unwrap();
        let p = gaussian_project(&m).unwrap();
        assert!(p.degenerate);
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(EmpiricalMeasure::weighted(vec![v1(0.0), v1(1.0)], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::weighted(vec![v1(0.0), v1(1.0)], vec![1.5, -0.5]).is_err());
        assert!(EmpiricalMeasure::uniform(vec![]).is_err());
    }

    #[test]
    fn scalar_density_matches_closed_form() {
        let g = GaussianMeasure::scalar(1.0, 4.0).unwrap();
        let x = v1(2.0);
        let expect = (-(1.0f64).powi(2) / 8.0).exp() / (2.0 * std::f64::consts::PI * 4.0).sqrt();
        assert!((g.density(&x).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn projection_error_decays_at_monte_carlo_rate() {
        let g = GaussianMeasure::new(
            dvector![1.0, -1.0],
            DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]),
        )
        .unwrap();
        let sizes = [100usize, 1_000, 10_000, 100_000];
        let mut mean_err = Vec::new();
        let mut cov_err = Vec::new();
        for &n in &sizes {
            let (mut me, mut ce) = (0.0, 0.0);
            for seed in 0..20u64 {
                let m = sample(&g, n, &RngStream::new(seed, n as u64)).unwrap();
                let p = gaussian_project(&m).unwrap().gaussian;
                me += (p.mean() - g.mean()).norm();
                ce += (p.cov() - g.cov()).norm();
            }
            mean_err.push(me / 20.0);
            cov_err.push(ce / 20.0);
        }
        for errs in [&mean_err, &cov_err] {
            let slope = loglog_slope(&sizes, errs);
            assert!((slope + 0.5).abs() < 0.15, "slope {slope} from {errs:?}");
        }
    }

    fn loglog_slope(xs: &[usize], ys: &[f64]) -> f64 {
        let lx: Vec<f64> = xs.iter().map(|x| (*x as f64).ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        let n = lx.len() as f64;
        let mx = lx.iter().sum::<f64>() / n;
        let my = ly.iter().sum::<f64>() / n;
        let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
        sxy / sxx
    }

    proptest! {
        #[test]
        fn moments_are_permutation_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 2..20),
            rot in 0usize..20,
        ) {
            let particles: Vec<_> = xs.iter().map(|x| v1(*x)).collect();
            let raw: Vec<f64> = (0..xs.len()).map(|i| 1.0 + i as f64).collect();
            let a = EmpiricalMeasure::from_unnormalized(particles.clone(), &raw).unwrap();
            let k = rot % xs.len();
            let mut p2 = particles.clone();
            p2.rotate_left(k);
            let mut r2 = raw.clone();
            r2.rotate_left(k);
            let b = EmpiricalMeasure::from_unnormalized(p2, &r2).unwrap();
            let (ma, ca) = empirical_moments(&a).unwrap();
            let (mb, cb) = empirical_moments(&b).unwrap();
            prop_assert!((ma[0] - mb[0]).abs() < 1e-12);
            prop_assert!((ca[(0, 0)] - cb[(0, 0)]).abs() < 1e-10);
        }

        #[test]
        fn equal_weights_match_unweighted_exactly(xs in proptest::collection::vec(-10.0f64..10.0, 2..20)) {
            let particles: Vec<_> = xs.iter().map(|x| v1(*x)).collect();
            let j = xs.len();
            let u = EmpiricalMeasure::uniform(particles.clone()).unwrap();
            let w = EmpiricalMeasure::weighted(particles, vec![1.0 / j as f64; j]);
            // 1/J repeated may not sum to one within 1e-12 for every J; skip those.
            if let Ok(w) = w {
                prop_assert_eq!(empirical_moments(&u).unwrap(), empirical_moments(&w).unwrap());
            }
        }
    }
}
