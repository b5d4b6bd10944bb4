//! Gaussian mixture distributions: moments, densities, and sampling.
//!
//! A mixture with weights α_i, means μ_i, and covariances Σ_i has
//!   mean       μ̄ = Σ_i α_i μ_i,
//!   covariance Σ̄ = Σ_i α_i (Σ_i + μ_i μ_iᵀ) − μ̄ μ̄ᵀ,
//! the latter by the law of total variance.

use crate::error::{Error, Result};
use crate::linalg;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Weights must sum to one within this tolerance.
pub const WEIGHT_SUM_TOL: f64 = 1e-10;
/// Covariances must be symmetric within this fraction of their largest entry.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Allowed negative eigenvalue floor, relative to the largest eigenvalue.
pub const PSD_TOL: f64 = 1e-10;

const LN_TWO_PI: f64 = 1.8378770664093453;

/// Cached Cholesky data for density evaluation.
#[derive(Debug, Clone)]
struct DensityFactor {
    lower: DMatrix<f64>,
    half_log_det: f64,
}

/// One weighted Gaussian component.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    weight: f64,
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    sqrt_covariance: DMatrix<f64>,
    density_factor: Option<DensityFactor>,
}

impl GaussianComponent {
    /// Validates the component invariants: 0 < weight ≤ 1, finite mean,
    /// symmetric covariance (within 1e-12 of its largest entry), and
    /// eigenvalues no smaller than −1e-10 times the largest one.
    pub fn new(weight: f64, mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if !weight.is_finite() || weight <= 0.0 || weight > 1.0 + WEIGHT_SUM_TOL {
            return Err(Error::Invalid {
                what: "component weight",
                why: format!("{weight} is not in (0, 1]"),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid {
                what: "component mean",
                why: "contains a non-finite entry".into(),
            });
        }
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "mean has dimension {n} but covariance is {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        if covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid {
                what: "component covariance",
                why: "contains a non-finite entry".into(),
            });
        }
        if !linalg::is_symmetric(&covariance, SYMMETRY_TOL) {
            return Err(Error::Invalid {
                what: "component covariance",
                why: "is not symmetric".into(),
            });
        }
        let covariance = linalg::symmetrize(&covariance);
        let (lo, hi) = linalg::sym_eigen_range(&covariance);
        if lo < -PSD_TOL * hi.max(0.0) || hi < 0.0 {
            return Err(Error::Invalid {
                what: "component covariance",
                why: format!("not positive semidefinite (eigenvalue {lo:.3e})"),
            });
        }
        let sqrt_covariance = linalg::psd_sqrt(&covariance);
        let density_factor = linalg::cholesky_with_jitter(&covariance, 1e-12).map(|(ch, jitter)| {
            if jitter > 0.0 {
                log::warn!("near-singular covariance regularized with jitter {jitter:.3e}");
            }
            let lower = ch.l();
            let half_log_det = lower.diagonal().iter().map(|d| d.ln()).sum();
            DensityFactor {
                lower,
                half_log_det,
            }
        });
        Ok(Self {
            weight,
            mean,
            covariance,
            sqrt_covariance,
            density_factor,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log of the Gaussian density N(x; μ, Σ), ignoring the mixture weight.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let factor = self
            .density_factor
            .as_ref()
            .ok_or(Error::DegenerateComponent { index: usize::MAX })?;
        let diff = x - &self.mean;
        let z = factor
            .lower
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has positive diagonal");
        Ok(-0.5 * z.norm_squared() - 0.5 * self.dim() as f64 * LN_TWO_PI - factor.half_log_det)
    }

    /// One draw μ + Σ^{1/2} ξ with ξ standard normal.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        &self.mean + &self.sqrt_covariance * xi
    }
}

/// A finite Gaussian mixture over one state space.
#[derive(Debug, Clone)]
pub struct GmmDistribution {
    components: Vec<GaussianComponent>,
}

impl GmmDistribution {
    /// Validates that at least one component is present, that all components
    /// share one dimension, and that the weights sum to one within 1e-10.
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components.first().ok_or_else(|| Error::Invalid {
            what: "mixture",
            why: "no components".into(),
        })?;
        let dim = first.dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::DimensionMismatch(
                "mixture components have different dimensions".into(),
            ));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Invalid {
                what: "mixture weights",
                why: format!("sum to {total}, expected 1"),
            });
        }
        Ok(Self { components })
    }

    /// Single-component mixture with weight one.
    pub fn single(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![GaussianComponent::new(1.0, mean, covariance)?])
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Mixture mean Σ_i α_i μ_i.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for c in &self.components {
            m += c.mean() * c.weight;
        }
        m
    }

    /// Mixture covariance Σ_i α_i (Σ_i + μ_i μ_iᵀ) − μ̄ μ̄ᵀ.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mu = self.mean();
        let mut cov = DMatrix::zeros(n, n);
        for c in &self.components {
            cov += (c.covariance() + c.mean() * c.mean().transpose()) * c.weight;
        }
        cov -= &mu * mu.transpose();
        linalg::symmetrize(&cov)
    }

    /// Mixture density Σ_i α_i N(x; μ_i, Σ_i).
    pub fn pdf(&self, x: &DVector<f64>) -> Result<f64> {
        let logs = self.weighted_log_densities(x)?;
        let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if peak == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        let sum: f64 = logs.iter().map(|l| (l - peak).exp()).sum();
        Ok(peak.exp() * sum)
    }

    /// log(α_i N(x; μ_i, Σ_i)) for every component, for use in
    /// numerically stable posterior-weight computations.
    pub fn weighted_log_densities(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "point has dimension {}, mixture has {}",
                x.len(),
                self.dim()
            )));
        }
        self.components
            .iter()
            .enumerate()
            .map(|(index, c)| {
                c.log_density(x)
                    .map(|l| l + c.weight.ln())
                    .map_err(|_| Error::DegenerateComponent { index })
            })
            .collect()
    }

    /// `count` independent draws, reproducible for a given seed.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        if count == 0 {
            return Err(Error::Invalid {
                what: "sample count",
                why: "must be at least 1".into(),
            });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Ok((0..count).map(|_| self.draw(&mut rng)).collect())
    }

    /// One draw: picks a component by weight, then draws from it.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c.draw(rng);
            }
        }
        self.components.last().unwrap().draw(rng)
    }

    /// Single Gaussian with the same mean and covariance as the mixture.
    pub fn moment_matched(&self) -> Result<GmmDistribution> {
        GmmDistribution::single(self.mean(), self.covariance())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_component_1d() -> GmmDistribution {
        GmmDistribution::new(vec![
            GaussianComponent::new(0.3, DVector::from_vec(vec![-1.0]), DMatrix::from_vec(1, 1, vec![1.0])).unwrap(),
            GaussianComponent::new(0.7, DVector::from_vec(vec![2.0]), DMatrix::from_vec(1, 1, vec![4.0])).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn standard_normal_density_at_origin() {
        let g = GmmDistribution::single(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(
            g.pdf(&DVector::zeros(1)).unwrap(),
            0.3989422804014327,
            max_relative = 1e-15
        );
    }

    #[test]
    fn two_component_moments() {
        let g = two_component_1d();
        assert_relative_eq!(g.mean()[0], 1.1, max_relative = 1e-14);
        // 0.3·(1 + 1) + 0.7·(4 + 4) − 1.1² = 4.99
        assert_relative_eq!(g.covariance()[(0, 0)], 4.99, max_relative = 1e-14);
    }

    #[test]
    fn mixture_density_is_weighted_sum() {
        let g = two_component_1d();
        let phi = |x: f64, m: f64, v: f64| {
            (-0.5 * (x - m).powi(2) / v).exp() / (v * 2.0 * std::f64::consts::PI).sqrt()
        };
        let expected = 0.3 * phi(0.0, -1.0, 1.0) + 0.7 * phi(0.0, 2.0, 4.0);
        assert_relative_eq!(
            g.pdf(&DVector::zeros(1)).unwrap(),
            expected,
            max_relative = 1e-13
        );
    }

    #[test]
    fn sampling_matches_moments() {
        let g = two_component_1d();
        let draws = g.sample(100_000, 7).unwrap();
        let n = draws.len() as f64;
        let mean: f64 = draws.iter().map(|x| x[0]).sum::<f64>() / n;
        let sd = g.covariance()[(0, 0)].sqrt();
        assert!(
            (mean - 1.1).abs() < 3.0 * sd / n.sqrt(),
            "sample mean {mean} too far from 1.1"
        );
        let var: f64 = draws.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert_relative_eq!(var, 4.99, max_relative = 0.05);
    }

    #[test]
    fn sampling_is_reproducible() {
        let g = two_component_1d();
        let a = g.sample(100, 42).unwrap();
        let b = g.sample(100, 42).unwrap();
        assert_eq!(a, b);
        let c = g.sample(100, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let comp = |w| {
            GaussianComponent::new(w, DVector::zeros(1), DMatrix::identity(1, 1)).unwrap()
        };
        assert!(GmmDistribution::new(vec![comp(0.5), comp(0.4)]).is_err());
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0]);
        assert!(GaussianComponent::new(1.0, DVector::zeros(2), cov).is_err());
    }

    #[test]
    fn indefinite_covariance_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(GaussianComponent::new(1.0, DVector::zeros(2), cov).is_err());
    }

    #[test]
    fn singular_covariance_still_has_moments_and_samples() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let g = GmmDistribution::single(DVector::zeros(2), cov.clone()).unwrap();
        assert_relative_eq!(g.covariance(), cov, epsilon = 1e-14);
        let draws = g.sample(1000, 3).unwrap();
        for x in &draws {
            // Mass lies on the line x0 = x1.
            assert!((x[0] - x[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn trace_of_mixture_covariance_dominates_weighted_component_traces() {
        use rand::RngCore;
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..200 {
            let dim = 1 + (rng.next_u32() as usize) % 4;
            let k = 1 + (rng.next_u32() as usize) % 4;
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
            let total: f64 = raw.iter().sum();
            let comps: Vec<GaussianComponent> = raw
                .iter()
                .map(|w| {
                    let mean = DVector::from_fn(dim, |_, _| rng.random::<f64>() * 4.0 - 2.0);
                    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() - 0.5);
                    let cov = &m * m.transpose() + DMatrix::identity(dim, dim) * 0.01;
                    GaussianComponent::new(w / total, mean, cov).unwrap()
                })
                .collect();
            let g = GmmDistribution::new(comps).unwrap();
            let mixed = g.covariance().trace();
            let weighted: f64 = g
                .components()
                .iter()
                .map(|c| c.weight() * c.covariance().trace())
                .sum();
            assert!(
                mixed >= weighted - 1e-12 * mixed.abs().max(1.0),
                "trace {mixed} < weighted component traces {weighted}"
            );
        }
    }
}
