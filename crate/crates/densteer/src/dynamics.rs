//! Controlled diffusion models dx = f(t, x) dt + B u dt + D dw.
//!
//! Drift fields are nonlinear in general; the input matrix B and noise
//! matrix D are constant.  Planetary-motion state is kept in canonical
//! heliocentric units (AU for length, days for time) so that covariances
//! spanning both position and velocity stay within a few orders of magnitude
//! of each other.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock, RwLock};

/// Kilometres per astronomical unit.
pub const AU_KM: f64 = 1.495978707e8;
/// Seconds per day.
pub const DAY_SECONDS: f64 = 86400.0;
/// Multiply km/s by this to get AU/day.
pub const KM_PER_S_TO_AU_PER_DAY: f64 = DAY_SECONDS / AU_KM;
/// Heliocentric gravitational parameter in AU³/day².
pub const SUN_MU: f64 = 2.9591e-4;

/// Converts a diffusion intensity given in m/s^{3/2} to AU/day^{3/2}.
pub fn noise_intensity_si_to_canonical(si: f64) -> f64 {
    si * DAY_SECONDS.powf(1.5) / (AU_KM * 1000.0)
}

/// A controlled diffusion with constant input and noise matrices.
pub trait Dynamics: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    fn input_matrix(&self) -> &DMatrix<f64>;
    fn noise_matrix(&self) -> &DMatrix<f64>;
    /// Drift f(t, x).
    fn drift(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>>;
    /// State Jacobian ∇_x f(t, x).
    fn jacobian(&self, t: f64, x: &DVector<f64>) -> Result<DMatrix<f64>>;
    /// Scalar parameters for run manifests.
    fn parameters(&self) -> Vec<(String, f64)> {
        Vec::new()
    }
}

/// Planar two-body motion around the sun with fully actuated acceleration.
///
/// State (pˣ, pʸ, vˣ, vʸ) in AU and AU/day,
///   ṗ = v,  v̇ = −μ p / ‖p‖³ + u + g_v ẇ.
pub struct TwoBody2d {
    mu: f64,
    noise_intensity: f64,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl TwoBody2d {
    /// Radii below this (in AU) are treated as a drift singularity.
    pub const MIN_RADIUS: f64 = 1e-8;

    pub fn new(mu: f64, noise_intensity: f64) -> Result<Self> {
        if !mu.is_finite() || mu <= 0.0 {
            return Err(Error::Invalid {
                what: "gravitational parameter",
                why: format!("{mu} is not positive"),
            });
        }
        if !noise_intensity.is_finite() || noise_intensity < 0.0 {
            return Err(Error::Invalid {
                what: "noise intensity",
                why: format!("{noise_intensity} is negative"),
            });
        }
        let mut b = DMatrix::zeros(4, 2);
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 1.0;
        let d = &b * noise_intensity;
        Ok(Self {
            mu,
            noise_intensity,
            b,
            d,
        })
    }

    fn radius(&self, x: &DVector<f64>) -> Result<f64> {
        let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
        if r < Self::MIN_RADIUS {
            return Err(Error::DriftSingularity {
                model: "two_body_2d".into(),
                radius: r,
            });
        }
        Ok(r)
    }
}

impl Dynamics for TwoBody2d {
    fn name(&self) -> &str {
        "two_body_2d"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn control_dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        2
    }

    fn input_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    fn noise_matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    fn drift(&self, _t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.radius(x)?;
        let s = -self.mu / (r * r * r);
        Ok(DVector::from_vec(vec![x[2], x[3], s * x[0], s * x[1]]))
    }

    fn jacobian(&self, _t: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let r = self.radius(x)?;
        let r2 = r * r;
        let r5 = r2 * r2 * r;
        let (px, py) = (x[0], x[1]);
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        // ∂v̇/∂p = μ (3 p pᵀ − ‖p‖² I) / ‖p‖⁵
        a[(2, 0)] = self.mu * (3.0 * px * px - r2) / r5;
        a[(2, 1)] = self.mu * 3.0 * px * py / r5;
        a[(3, 0)] = a[(2, 1)];
        a[(3, 1)] = self.mu * (3.0 * py * py - r2) / r5;
        Ok(a)
    }

    fn parameters(&self) -> Vec<(String, f64)> {
        vec![
            ("sun_mu".into(), self.mu),
            ("noise_intensity".into(), self.noise_intensity),
        ]
    }
}

/// One-dimensional double integrator: ṗ = v, v̇ = u + g ẇ.
pub struct DoubleIntegrator {
    noise_intensity: f64,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl DoubleIntegrator {
    pub fn new(noise_intensity: f64) -> Result<Self> {
        if !noise_intensity.is_finite() || noise_intensity < 0.0 {
            return Err(Error::Invalid {
                what: "noise intensity",
                why: format!("{noise_intensity} is negative"),
            });
        }
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let d = &b * noise_intensity;
        Ok(Self {
            noise_intensity,
            b,
            d,
        })
    }
}

impl Dynamics for DoubleIntegrator {
    fn name(&self) -> &str {
        "double_integrator"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn input_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    fn noise_matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    fn drift(&self, _t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(vec![x[1], 0.0]))
    }

    fn jacobian(&self, _t: f64, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 1)] = 1.0;
        Ok(a)
    }

    fn parameters(&self) -> Vec<(String, f64)> {
        vec![("noise_intensity".into(), self.noise_intensity)]
    }
}

/// Linear time-invariant drift ẋ = A x, for tests and benchmarks.
pub struct LinearDynamics {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || d.nrows() != n {
            return Err(Error::DimensionMismatch(
                "linear model matrices have inconsistent sizes".into(),
            ));
        }
        Ok(Self { a, b, d })
    }
}

impl Dynamics for LinearDynamics {
    fn name(&self) -> &str {
        "linear"
    }

    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn noise_dim(&self) -> usize {
        self.d.ncols()
    }

    fn input_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    fn noise_matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    fn drift(&self, _t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x)
    }

    fn jacobian(&self, _t: f64, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.a.clone())
    }
}

/// Central-difference Jacobian, used to validate the analytic ones.
pub fn fd_jacobian(model: &dyn Dynamics, t: f64, x: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = model.state_dim();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[j] += h;
        lo[j] -= h;
        let df = (model.drift(t, &hi)? - model.drift(t, &lo)?) / (2.0 * h);
        jac.set_column(j, &df);
    }
    Ok(jac)
}

type ModelFactory =
    Box<dyn Fn(&BTreeMap<String, f64>) -> Result<Arc<dyn Dynamics>> + Send + Sync>;

fn registry() -> &'static RwLock<BTreeMap<String, ModelFactory>> {
    static REGISTRY: OnceLock<RwLock<BTreeMap<String, ModelFactory>>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map: BTreeMap<String, ModelFactory> = BTreeMap::new();
        map.insert(
            "two_body_2d".into(),
            Box::new(|params| {
                let mu = params.get("sun_mu").copied().unwrap_or(SUN_MU);
                let g = params
                    .get("noise_intensity")
                    .copied()
                    .unwrap_or_else(|| noise_intensity_si_to_canonical(1e-4));
                Ok(Arc::new(TwoBody2d::new(mu, g)?) as Arc<dyn Dynamics>)
            }),
        );
        map.insert(
            "double_integrator".into(),
            Box::new(|params| {
                let g = params.get("noise_intensity").copied().unwrap_or(0.1);
                Ok(Arc::new(DoubleIntegrator::new(g)?) as Arc<dyn Dynamics>)
            }),
        );
        RwLock::new(map)
    })
}

/// Instantiates a registered model by name.
pub fn build_model(name: &str, params: &BTreeMap<String, f64>) -> Result<Arc<dyn Dynamics>> {
    let reg = registry().read().expect("model registry poisoned");
    let factory = reg
        .get(name)
        .ok_or_else(|| Error::UnknownModel(name.to_string()))?;
    factory(params)
}

/// Registers (or replaces) a model factory under the given name.
pub fn register_model<F>(name: &str, factory: F)
where
    F: Fn(&BTreeMap<String, f64>) -> Result<Arc<dyn Dynamics>> + Send + Sync + 'static,
{
    registry()
        .write()
        .expect("model registry poisoned")
        .insert(name.to_string(), Box::new(factory));
}

/// Names of all registered models.
pub fn model_names() -> Vec<String> {
    registry()
        .read()
        .expect("model registry poisoned")
        .keys()
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_conversions() {
        assert_relative_eq!(KM_PER_S_TO_AU_PER_DAY, 5.775483273639937e-4, max_relative = 1e-12);
        assert_relative_eq!(
            noise_intensity_si_to_canonical(1e-4),
            1.6976384446076203e-8,
            max_relative = 1e-12
        );
    }

    #[test]
    fn two_body_drift_on_unit_circle() {
        let m = TwoBody2d::new(SUN_MU, 0.0).unwrap();
        let v = (SUN_MU / 1.0).sqrt();
        let f = m
            .drift(0.0, &DVector::from_vec(vec![1.0, 0.0, 0.0, v]))
            .unwrap();
        assert_relative_eq!(f[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(f[1], v, max_relative = 1e-15);
        assert_relative_eq!(f[2], -SUN_MU, max_relative = 1e-15);
        assert_relative_eq!(f[3], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gravity_gradient_block_has_trace_mu_over_r_cubed() {
        // tr(μ (3 p pᵀ − r² I) / r⁵) = μ / r³; the full Jacobian's own
        // diagonal blocks are zero
        let m = TwoBody2d::new(SUN_MU, 0.0).unwrap();
        for r in [0.7, 1.0, 1.524] {
            let x = DVector::from_vec(vec![r * 0.6, r * 0.8, 0.01, -0.02]);
            let a = m.jacobian(0.0, &x).unwrap();
            assert_relative_eq!(a.trace(), 0.0, epsilon = 1e-18);
            let g = a.view((2, 0), (2, 2));
            assert_relative_eq!(g[(0, 0)] + g[(1, 1)], SUN_MU / (r * r * r), max_relative = 1e-12);
        }
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let two_body = TwoBody2d::new(SUN_MU, 0.0).unwrap();
        let states = [
            DVector::from_vec(vec![1.0, 0.0, 0.0, 0.017]),
            DVector::from_vec(vec![-0.9, 0.4, 0.01, -0.015]),
            DVector::from_vec(vec![0.3, -1.4, -0.005, 0.002]),
        ];
        for x in &states {
            let analytic = two_body.jacobian(0.0, x).unwrap();
            let fd = fd_jacobian(&two_body, 0.0, x).unwrap();
            assert_relative_eq!(analytic, fd, max_relative = 1e-6, epsilon = 1e-9);
        }

        let di = DoubleIntegrator::new(0.1).unwrap();
        let x = DVector::from_vec(vec![0.4, -1.2]);
        assert_relative_eq!(
            di.jacobian(0.0, &x).unwrap(),
            fd_jacobian(&di, 0.0, &x).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn singularity_guard() {
        let m = TwoBody2d::new(SUN_MU, 0.0).unwrap();
        let x = DVector::from_vec(vec![1e-9, 0.0, 0.0, 0.0]);
        assert!(matches!(
            m.drift(0.0, &x),
            Err(Error::DriftSingularity { .. })
        ));
        assert!(m.jacobian(0.0, &x).is_err());
    }

    #[test]
    fn registry_builds_known_models() {
        let params = BTreeMap::new();
        let m = build_model("two_body_2d", &params).unwrap();
        assert_eq!(m.state_dim(), 4);
        assert_eq!(m.control_dim(), 2);
        let m = build_model("double_integrator", &params).unwrap();
        assert_eq!(m.state_dim(), 2);
        assert!(matches!(
            build_model("pendulum", &params),
            Err(Error::UnknownModel(_))
        ));
    }

    #[test]
    fn registry_accepts_new_models() {
        register_model("still_2d", |_| {
            Ok(Arc::new(LinearDynamics::new(
                DMatrix::zeros(2, 2),
                DMatrix::identity(2, 2),
                DMatrix::identity(2, 2),
            )?) as Arc<dyn Dynamics>)
        });
        let m = build_model("still_2d", &BTreeMap::new()).unwrap();
        assert_eq!(m.state_dim(), 2);
        assert!(model_names().contains(&"still_2d".to_string()));
    }
}
