//! Feedback policies assembled from solved bridges: a single affine law
//! and the posterior-weighted mixture of affine laws.

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::cholesky_with_jitter;
use crate::ltv::BridgeSolution;

const LN_TWO_PI: f64 = 1.837_877_066_409_345_3;

/// A state-feedback law evaluated per grid interval.
///
/// Implementations are immutable after assembly and evaluation is pure,
/// so policies can be shared freely across particle threads.
pub trait ControlPolicy: Send + Sync {
    fn control_dim(&self) -> usize;
    fn interval_count(&self) -> usize;
    /// Control applied on interval k (node k to node k+1) at state x.
    fn control(&self, k: usize, x: &DVector<f64>) -> DVector<f64>;
}

/// Cached Cholesky factor of one bridge covariance at one node.
struct NodeFactor {
    lower: DMatrix<f64>,
    half_log_det: f64,
}

impl NodeFactor {
    fn build(sigma: &DMatrix<f64>, context: &str) -> Result<Self> {
        let (ch, jitter) = cholesky_with_jitter(sigma, 1e-12).ok_or_else(|| Error::Invalid {
            what: "bridge covariance",
            why: format!("{context}: not positive definite"),
        })?;
        if jitter > 0.0 {
            warn!("bridge covariance needed jitter {jitter:.3e} ({context})");
        }
        let lower = ch.l();
        let half_log_det = lower.diagonal().iter().map(|d| d.ln()).sum();
        Ok(NodeFactor { lower, half_log_det })
    }

    /// Mahalanobis norm ‖L^{-1} d‖.
    fn mahalanobis(&self, d: &DVector<f64>) -> f64 {
        self.lower
            .solve_lower_triangular(d)
            .expect("factor has positive diagonal")
            .norm()
    }

    fn log_density(&self, d: &DVector<f64>) -> f64 {
        let z = self.mahalanobis(d);
        -0.5 * z * z - 0.5 * d.len() as f64 * LN_TWO_PI - self.half_log_det
    }
}

fn validate_bridge(bridge: &BridgeSolution) -> Result<()> {
    let nodes = bridge.ltv.grid.len();
    if bridge.covariances.len() != nodes
        || bridge.gains.len() != nodes - 1
        || bridge.reference_drifts.len() != nodes
    {
        return Err(Error::DimensionMismatch(format!(
            "bridge ({}, {}) arrays do not match its {} node grid",
            bridge.pair.0, bridge.pair.1, nodes
        )));
    }
    Ok(())
}

/// Affine law from a single bridge: u = ū_k + K_k (x − μ_k).
pub struct SlPolicy {
    bridge: BridgeSolution,
}

impl SlPolicy {
    pub fn new(bridge: BridgeSolution) -> Result<Self> {
        validate_bridge(&bridge)?;
        Ok(SlPolicy { bridge })
    }

    pub fn bridge(&self) -> &BridgeSolution {
        &self.bridge
    }
}

impl ControlPolicy for SlPolicy {
    fn control_dim(&self) -> usize {
        self.bridge.ltv.control_dim()
    }

    fn interval_count(&self) -> usize {
        self.bridge.ltv.grid.interval_count()
    }

    fn control(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        eval_sl_control(self, k, x)
    }
}

/// Mixture of bridge policies blended by the posterior probability that
/// the state belongs to each bridge's planned Gaussian flow.
pub struct MixturePolicy {
    bridges: Vec<BridgeSolution>,
    lambdas: Vec<f64>,
    log_lambdas: Vec<f64>,
    factors: Vec<Vec<NodeFactor>>,
}

impl MixturePolicy {
    /// Assembles the mixture. Every bridge must carry positive mass and
    /// share one grid; the masses must sum to 1.
    pub fn new(bridges: Vec<BridgeSolution>, lambdas: Vec<f64>) -> Result<Self> {
        if bridges.is_empty() {
            return Err(Error::Invalid {
                what: "mixture policy",
                why: "needs at least one bridge".into(),
            });
        }
        if bridges.len() != lambdas.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} bridges but {} weights",
                bridges.len(),
                lambdas.len()
            )));
        }
        if lambdas.iter().any(|l| !l.is_finite() || *l <= 0.0) {
            return Err(Error::Invalid {
                what: "mixture weights",
                why: "every included pair must carry positive mass".into(),
            });
        }
        let total: f64 = lambdas.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid {
                what: "mixture weights",
                why: format!("sum {total} is not 1"),
            });
        }
        for bridge in &bridges {
            validate_bridge(bridge)?;
            if bridge.ltv.grid != bridges[0].ltv.grid {
                return Err(Error::Invalid {
                    what: "mixture policy",
                    why: "bridges use different time grids".into(),
                });
            }
            if bridge.ltv.control_dim() != bridges[0].ltv.control_dim()
                || bridge.ltv.state_dim() != bridges[0].ltv.state_dim()
            {
                return Err(Error::DimensionMismatch(
                    "bridges disagree on state or control dimensions".into(),
                ));
            }
        }
        let factors = bridges
            .iter()
            .map(|bridge| {
                bridge
                    .covariances
                    .iter()
                    .enumerate()
                    .map(|(k, sigma)| {
                        NodeFactor::build(
                            sigma,
                            &format!("pair ({}, {}), node {k}", bridge.pair.0, bridge.pair.1),
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let log_lambdas = lambdas.iter().map(|l| l.ln()).collect();
        Ok(MixturePolicy {
            bridges,
            lambdas,
            log_lambdas,
            factors,
        })
    }

    pub fn bridges(&self) -> &[BridgeSolution] {
        &self.bridges
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Posterior bridge weights at node k, computed in the log domain:
    /// w_b ∝ λ_b N(x; μ_{k|b}, Σ_{k|b}). If every term underflows to
    /// -inf the mass collapses onto the bridge nearest in Mahalanobis
    /// distance.
    pub fn posterior_weights(&self, k: usize, x: &DVector<f64>) -> Vec<f64> {
        let logs: Vec<f64> = self
            .bridges
            .iter()
            .zip(self.factors.iter())
            .zip(self.log_lambdas.iter())
            .map(|((bridge, factors), log_lambda)| {
                let d = x - &bridge.ltv.reference_states[k];
                log_lambda + factors[k].log_density(&d)
            })
            .collect();
        let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights = vec![0.0; logs.len()];
        if !peak.is_finite() {
            let nearest = self
                .bridges
                .iter()
                .zip(self.factors.iter())
                .enumerate()
                .min_by(|(_, (ba, fa)), (_, (bb, fb))| {
                    let da = fa[k].mahalanobis(&(x - &ba.ltv.reference_states[k]));
                    let db = fb[k].mahalanobis(&(x - &bb.ltv.reference_states[k]));
                    da.partial_cmp(&db).expect("distances are ordered")
                })
                .map(|(i, _)| i)
                .expect("mixture has bridges");
            warn!("mixture weights underflowed at node {k}; using bridge {nearest} alone");
            weights[nearest] = 1.0;
            return weights;
        }
        let mut total = 0.0;
        for (w, l) in weights.iter_mut().zip(logs.iter()) {
            *w = (l - peak).exp();
            total += *w;
        }
        for w in &mut weights {
            *w /= total;
        }
        weights
    }
}

impl ControlPolicy for MixturePolicy {
    fn control_dim(&self) -> usize {
        self.bridges[0].ltv.control_dim()
    }

    fn interval_count(&self) -> usize {
        self.bridges[0].ltv.grid.interval_count()
    }

    fn control(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        eval_ml_control(self, k, x)
    }
}

/// Posterior-weighted blend of the bridge affine laws.
pub fn eval_ml_control(policy: &MixturePolicy, k: usize, x: &DVector<f64>) -> DVector<f64> {
    let weights = policy.posterior_weights(k, x);
    let mut u = DVector::zeros(policy.control_dim());
    for (w, bridge) in weights.iter().zip(policy.bridges.iter()) {
        if *w > 0.0 {
            u += *w * bridge.control(k, x);
        }
    }
    u
}

/// Plain affine evaluation of the single-bridge law.
pub fn eval_sl_control(policy: &SlPolicy, k: usize, x: &DVector<f64>) -> DVector<f64> {
    policy.bridge.control(k, x)
}

/// The blended first-order drift the mixture policy is implicitly
/// steering: Σ_b w_b(x) (f(μ_{k|b}) + A_{k|b} (x − μ_{k|b})).
pub fn ml_drift_approximation(policy: &MixturePolicy, k: usize, x: &DVector<f64>) -> DVector<f64> {
    let weights = policy.posterior_weights(k, x);
    let mut f = DVector::zeros(policy.bridges[0].ltv.state_dim());
    for (w, bridge) in weights.iter().zip(policy.bridges.iter()) {
        if *w > 0.0 {
            f += *w * bridge.linearized_drift(k, x);
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltv::{LtvTrajectory, TimeGrid};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    /// Bridge with constant reference, gains, and covariance; drift
    /// values follow the linear field x ↦ A x.
    fn constant_bridge(
        pair: (usize, usize),
        nodes: usize,
        a: DMatrix<f64>,
        mean: DVector<f64>,
        control: DVector<f64>,
        gain: DMatrix<f64>,
        sigma: DMatrix<f64>,
    ) -> BridgeSolution {
        let n = mean.len();
        let grid = TimeGrid::uniform(1.0, nodes).unwrap();
        let ltv = LtvTrajectory::new(
            grid,
            vec![a.clone(); nodes],
            DMatrix::identity(n, control.len()),
            DMatrix::identity(n, 1),
            vec![mean.clone(); nodes],
            vec![control; nodes - 1],
        )
        .unwrap();
        BridgeSolution {
            pair,
            reference_drifts: vec![&a * &mean; nodes],
            ltv,
            covariances: vec![sigma; nodes],
            gains: vec![gain; nodes - 1],
            cost: 0.0,
        }
    }

    fn two_bridge_policy(separation: f64) -> MixturePolicy {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let b0 = constant_bridge(
            (0, 0),
            5,
            a.clone(),
            DVector::zeros(2),
            DVector::from_row_slice(&[1.0, -1.0]),
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::identity(2, 2) * 0.25,
        );
        let b1 = constant_bridge(
            (1, 0),
            5,
            a,
            DVector::from_row_slice(&[separation, separation]),
            DVector::from_row_slice(&[-1.0, 1.0]),
            DMatrix::identity(2, 2) * -0.5,
            DMatrix::identity(2, 2) * 0.25,
        );
        MixturePolicy::new(vec![b0, b1], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn single_bridge_is_the_affine_law() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let bridge = constant_bridge(
            (0, 0),
            4,
            a,
            DVector::from_row_slice(&[1.0, 2.0]),
            DVector::from_row_slice(&[0.3]),
            DMatrix::from_row_slice(1, 2, &[2.0, -1.0]),
            DMatrix::identity(2, 2),
        );
        let reference = bridge.clone();
        let policy = MixturePolicy::new(vec![bridge], vec![1.0]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for k in 0..3 {
            let x = DVector::from_fn(2, |_, _| rng.sample(StandardNormal));
            let u = eval_ml_control(&policy, k, &x);
            assert_abs_diff_eq!(u, reference.control(k, &x), epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_bridges_collapse_to_one() {
        let a = DMatrix::identity(2, 2);
        let make = || {
            constant_bridge(
                (0, 0),
                4,
                a.clone(),
                DVector::from_row_slice(&[0.5, -0.5]),
                DVector::from_row_slice(&[2.0]),
                DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
                DMatrix::identity(2, 2),
            )
        };
        let split = MixturePolicy::new(vec![make(), make()], vec![0.3, 0.7]).unwrap();
        let merged = MixturePolicy::new(vec![make()], vec![1.0]).unwrap();
        let x = DVector::from_row_slice(&[1.7, 0.4]);
        for k in 0..3 {
            assert_abs_diff_eq!(
                eval_ml_control(&split, k, &x),
                eval_ml_control(&merged, k, &x),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn dominant_bridge_dictates_the_control() {
        // separation 10 with σ² = 0.25 puts the log-weight gap near 400
        let policy = two_bridge_policy(10.0);
        let x = policy.bridges()[0].ltv.reference_states[1].clone();
        let u = eval_ml_control(&policy, 1, &x);
        assert_abs_diff_eq!(u, policy.bridges()[0].control(1, &x), epsilon = 1e-10);
        let f = ml_drift_approximation(&policy, 1, &x);
        assert_abs_diff_eq!(f, policy.bridges()[0].reference_drifts[1], epsilon = 1e-10);
    }

    #[test]
    fn posterior_weights_sum_to_one_everywhere() {
        let policy = two_bridge_policy(2.0);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
            let k = rng.random_range(0..4usize);
            let w = policy.posterior_weights(k, &x);
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(w.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn astronomically_far_states_fall_back_to_one_bridge() {
        let policy = two_bridge_policy(2.0);
        let x = DVector::from_row_slice(&[1e200, -1e200]);
        let w = policy.posterior_weights(0, &x);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(w.iter().any(|v| *v == 1.0));
        let u = eval_ml_control(&policy, 0, &x);
        assert!(u.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn drift_blend_is_exact_for_linear_fields() {
        // both bridges linearize the same field f(x) = A x, so the
        // blend must reproduce it exactly whatever the weights are
        let policy = two_bridge_policy(2.0);
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal) * 2.0);
            let f = ml_drift_approximation(&policy, 2, &x);
            assert_abs_diff_eq!(f, &a * &x, epsilon = 1e-12);
        }
    }

    #[test]
    fn control_is_continuous_between_the_bridges() {
        let policy = two_bridge_policy(2.0);
        let step = 1e-6;
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal) * 1.5);
            let dir = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let dir = &dir / dir.norm();
            let du = eval_ml_control(&policy, 1, &(&x + &dir * step)) - eval_ml_control(&policy, 1, &x);
            assert!(du.norm() < 1e-4, "jump of {} at probe scale {}", du.norm(), step);
        }
    }

    #[test]
    fn sl_policy_is_affine() {
        let bridge = constant_bridge(
            (0, 0),
            4,
            DMatrix::identity(2, 2),
            DVector::from_row_slice(&[1.0, -1.0]),
            DVector::from_row_slice(&[0.7]),
            DMatrix::from_row_slice(1, 2, &[3.0, 0.5]),
            DMatrix::identity(2, 2),
        );
        let policy = SlPolicy::new(bridge).unwrap();
        let mu = policy.bridge().ltv.reference_states[0].clone();
        assert_abs_diff_eq!(
            eval_sl_control(&policy, 0, &mu),
            DVector::from_row_slice(&[0.7]),
            epsilon = 1e-15
        );
        let x1 = DVector::from_row_slice(&[2.0, 0.0]);
        let x2 = DVector::from_row_slice(&[-0.5, 1.5]);
        let lhs = eval_sl_control(&policy, 0, &x1) + eval_sl_control(&policy, 0, &x2)
            - eval_sl_control(&policy, 0, &mu);
        let rhs = eval_sl_control(&policy, 0, &(&x1 + &x2 - &mu));
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn mixture_validation_rejects_bad_inputs() {
        let make = |nodes| {
            constant_bridge(
                (0, 0),
                nodes,
                DMatrix::identity(1, 1),
                DVector::from_row_slice(&[0.0]),
                DVector::from_row_slice(&[0.0]),
                DMatrix::identity(1, 1),
                DMatrix::identity(1, 1),
            )
        };
        assert!(MixturePolicy::new(vec![], vec![]).is_err());
        assert!(MixturePolicy::new(vec![make(4)], vec![0.9]).is_err());
        assert!(MixturePolicy::new(vec![make(4), make(4)], vec![1.0, 0.0]).is_err());
        assert!(MixturePolicy::new(vec![make(4), make(5)], vec![0.5, 0.5]).is_err());
        assert!(MixturePolicy::new(vec![make(4)], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn policies_are_shareable_across_threads() {
        fn takes_policy<P: ControlPolicy>(_: &P) {}
        takes_policy(&two_bridge_policy(1.0));
    }
}
