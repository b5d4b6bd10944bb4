//! End-to-end policy assembly: per-pair reference trajectories,
//! linearizations and covariance steering, the coupling over component
//! pairs, and the final feedback laws.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::coupling::{solve_transport, TransportPlan};
use crate::cov_steer::{solve_ocs, OcsOptions, OcsSdpProblem};
use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::gmm::{GaussianComponent, GmmDistribution};
use crate::ltv::{BridgeSolution, LtvTrajectory, TimeGrid};
use crate::mean_ocp::{
    hohmann_initial_guess, solve_reference, MeanOcpOptions, MeanOcpProblem, ReferenceTrajectory,
};
use crate::policy::{MixturePolicy, SlPolicy};

/// Surrogate cost entered for pairs whose subproblem failed; the
/// coupling avoids these unless the marginals leave it no choice.
pub const FAILED_PAIR_COST: f64 = 1e30;

/// ε² added to D Dᵀ in the covariance recursion, standing in for the
/// noise the linearization ignores: one value for the whole diagonal
/// or one value per state.
#[derive(Debug, Clone)]
pub enum EpsilonSq {
    Scalar(f64),
    Diagonal(DVector<f64>),
}

impl Default for EpsilonSq {
    fn default() -> Self {
        EpsilonSq::Scalar(0.0)
    }
}

impl EpsilonSq {
    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        match self {
            EpsilonSq::Scalar(v) => DMatrix::identity(n, n) * *v,
            EpsilonSq::Diagonal(d) => DMatrix::from_diagonal(d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub mean_ocp: MeanOcpOptions,
    pub ocs: OcsOptions,
    /// Extra relinearize-and-resolve rounds for the single
    /// linearization baseline; 0 keeps the first pass.
    pub relinearize_iters: usize,
    /// Score pairs by the feedback energy alone instead of adding the
    /// mean steering energy.
    pub sdp_cost_only: bool,
    /// ε² added to the diagonal of D Dᵀ in the covariance recursion.
    pub epsilon_sq: EpsilonSq,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            mean_ocp: MeanOcpOptions::default(),
            ocs: OcsOptions::default(),
            relinearize_iters: 0,
            sdp_cost_only: false,
            epsilon_sq: EpsilonSq::default(),
        }
    }
}

/// One solved component pair.
pub struct PairSolution {
    pub bridge: BridgeSolution,
    pub mean_energy: f64,
    pub feedback_energy: f64,
}

impl PairSolution {
    fn score(&self, options: &SolverOptions) -> f64 {
        if options.sdp_cost_only {
            self.feedback_energy
        } else {
            self.mean_energy + self.feedback_energy
        }
    }
}

pub fn solve_pair(
    model: &dyn Dynamics,
    grid: &TimeGrid,
    pair: (usize, usize),
    start: &GaussianComponent,
    end: &GaussianComponent,
    guess: Option<ReferenceTrajectory>,
    options: &SolverOptions,
) -> Result<PairSolution> {
    let guess =
        guess.unwrap_or_else(|| hohmann_initial_guess(model, grid, start.mean(), end.mean()));
    let problem = MeanOcpProblem {
        model,
        grid: grid.clone(),
        start: start.mean().clone(),
        goal: end.mean().clone(),
        initial_guess: Some(guess),
    };
    let reference = solve_reference(&problem, &options.mean_ocp)?;
    if !reference.converged {
        return Err(Error::ReferenceNotConverged {
            iterations: reference.iterations,
            defect: reference.max_defect,
            boundary: reference.boundary_residual,
        });
    }
    let mut drifts = Vec::with_capacity(reference.states.len());
    for (k, x) in reference.states.iter().enumerate() {
        drifts.push(model.drift(grid.node(k), x)?);
    }
    let ltv = LtvTrajectory::from_reference(
        model,
        grid.clone(),
        reference.states,
        reference.controls,
    )?;
    let n = model.state_dim();
    let sdp = OcsSdpProblem {
        ltv: &ltv,
        sigma_start: start.covariance().clone(),
        sigma_end: end.covariance().clone(),
        control_weight: None,
        noise_regularization: options.epsilon_sq.matrix(n),
    };
    let ocs = solve_ocs(&sdp, &options.ocs)?;
    let mean_energy = reference.objective;
    let feedback_energy = ocs.cost;
    Ok(PairSolution {
        bridge: BridgeSolution {
            pair,
            ltv,
            reference_drifts: drifts,
            covariances: ocs.covariances,
            gains: ocs.gains,
            cost: mean_energy + feedback_energy,
        },
        mean_energy,
        feedback_energy,
    })
}

/// The assembled mixture policy plus the bookkeeping the run reports.
pub struct MlSolution {
    pub policy: MixturePolicy,
    /// C_ij for every pair; failed pairs hold the surrogate cost.
    pub pair_costs: DMatrix<f64>,
    pub plan: TransportPlan,
    pub transport_objective: f64,
    pub failed_pairs: Vec<(usize, usize)>,
}

/// Solves every component pair, couples them, and blends the bridges
/// carrying mass into a mixture policy.
pub fn build_ml_policy(
    model: &dyn Dynamics,
    gmm0: &GmmDistribution,
    gmm_t: &GmmDistribution,
    grid: &TimeGrid,
    options: &SolverOptions,
) -> Result<MlSolution> {
    check_boundaries(model, gmm0, gmm_t)?;
    let n0 = gmm0.len();
    let n1 = gmm_t.len();

    let mut results: Vec<Option<Result<PairSolution>>> = (0..n0 * n1)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / n1, idx % n1);
            Some(solve_pair(
                model,
                grid,
                (i, j),
                &gmm0.components()[i],
                &gmm_t.components()[j],
                None,
                options,
            ))
        })
        .collect();

    let mut costs = DMatrix::from_element(n0, n1, FAILED_PAIR_COST);
    let mut failed_pairs = Vec::new();
    for idx in 0..n0 * n1 {
        let (i, j) = (idx / n1, idx % n1);
        match results[idx].as_ref().expect("not yet taken") {
            Ok(pair) => costs[(i, j)] = pair.score(options),
            Err(err) => {
                warn!("pair ({i}, {j}) failed: {err}");
                failed_pairs.push((i, j));
            }
        }
    }

    let plan = solve_transport(&costs, &gmm0.weights(), &gmm_t.weights())?;
    let transport_objective = plan.objective(&costs);
    let support = plan.support();

    let mut bridges = Vec::with_capacity(support.len());
    let mut lambdas = Vec::with_capacity(support.len());
    for &(i, j, mass) in &support {
        match results[i * n1 + j].take().expect("support cells are unique") {
            Ok(pair) => {
                bridges.push(pair.bridge);
                lambdas.push(mass);
            }
            Err(err) => return Err(err.for_pair(i, j)),
        }
    }
    // basis cells with exactly zero mass are excluded by the support
    // threshold; renormalize the kept masses so they sum to one
    let total: f64 = lambdas.iter().sum();
    for l in &mut lambdas {
        *l /= total;
    }
    info!(
        "coupled {} of {} pairs, transport objective {transport_objective:.6e}",
        bridges.len(),
        n0 * n1
    );

    Ok(MlSolution {
        policy: MixturePolicy::new(bridges, lambdas)?,
        pair_costs: costs,
        plan,
        transport_objective,
        failed_pairs,
    })
}

/// The single-linearization baseline and its bookkeeping.
pub struct SlSolution {
    pub policy: SlPolicy,
    pub mean_energy: f64,
    pub feedback_energy: f64,
    /// Relinearization rounds actually taken.
    pub relinearizations: usize,
}

impl SlSolution {
    pub fn cost(&self) -> f64 {
        self.mean_energy + self.feedback_energy
    }
}

/// Collapses both boundary mixtures to single Gaussians, solves the one
/// resulting pair, and optionally relinearizes about the updated mean
/// trajectory until it stops moving.
pub fn build_sl_policy(
    model: &dyn Dynamics,
    gmm0: &GmmDistribution,
    gmm_t: &GmmDistribution,
    grid: &TimeGrid,
    options: &SolverOptions,
) -> Result<SlSolution> {
    check_boundaries(model, gmm0, gmm_t)?;
    let start = GaussianComponent::new(1.0, gmm0.mean(), gmm0.covariance())?;
    let end = GaussianComponent::new(1.0, gmm_t.mean(), gmm_t.covariance())?;

    let mut pair = solve_pair(model, grid, (0, 0), &start, &end, None, options)?;
    let mut rounds = 0usize;
    for _ in 0..options.relinearize_iters {
        let previous = pair.bridge.ltv.reference_states.clone();
        let guess = ReferenceTrajectory {
            states: previous.clone(),
            controls: pair.bridge.ltv.reference_controls.clone(),
        };
        pair = solve_pair(model, grid, (0, 0), &start, &end, Some(guess), options)?;
        rounds += 1;
        let shift = previous
            .iter()
            .zip(pair.bridge.ltv.reference_states.iter())
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        if shift < 1e-6 {
            break;
        }
    }

    Ok(SlSolution {
        mean_energy: pair.mean_energy,
        feedback_energy: pair.feedback_energy,
        relinearizations: rounds,
        policy: SlPolicy::new(pair.bridge)?,
    })
}

fn check_boundaries(
    model: &dyn Dynamics,
    gmm0: &GmmDistribution,
    gmm_t: &GmmDistribution,
) -> Result<()> {
    if gmm0.dim() != model.state_dim() || gmm_t.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "boundary mixtures have dimensions {} and {}, model needs {}",
            gmm0.dim(),
            gmm_t.dim(),
            model.state_dim()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DoubleIntegrator;
    use crate::policy::{eval_ml_control, eval_sl_control};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::DVector;

    fn gaussian(weight: f64, mean: &[f64], var: &[f64]) -> GaussianComponent {
        GaussianComponent::new(
            weight,
            DVector::from_row_slice(mean),
            DMatrix::from_diagonal(&DVector::from_row_slice(var)),
        )
        .unwrap()
    }

    fn quick_options() -> SolverOptions {
        SolverOptions::default()
    }

    #[test]
    fn single_pair_collapses_to_one_bridge() {
        let model = DoubleIntegrator::new(0.1).unwrap();
        let grid = TimeGrid::uniform(1.0, 21).unwrap();
        let gmm0 = GmmDistribution::new(vec![gaussian(1.0, &[0.0, 0.0], &[0.1, 0.05])]).unwrap();
        let gmm_t = GmmDistribution::new(vec![gaussian(1.0, &[1.0, 0.0], &[0.02, 0.01])]).unwrap();
        let ml = build_ml_policy(&model, &gmm0, &gmm_t, &grid, &quick_options()).unwrap();
        assert_eq!(ml.policy.bridges().len(), 1);
        assert_abs_diff_eq!(ml.policy.lambdas()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(ml.transport_objective, ml.pair_costs[(0, 0)], max_relative = 1e-12);

        let bridge = &ml.policy.bridges()[0];
        let (r0, r1) = bridge.boundary_residuals(
            gmm0.components()[0].covariance(),
            gmm_t.components()[0].covariance(),
        );
        assert!(r0 < 1e-6 && r1 < 1e-6, "boundary residuals {r0}, {r1}");

        // the baseline solves the same Gaussian-to-Gaussian problem, so
        // the two policies must agree at probe points
        let sl = build_sl_policy(&model, &gmm0, &gmm_t, &grid, &quick_options()).unwrap();
        for k in [0usize, 10, 19] {
            let x = DVector::from_row_slice(&[0.3 + 0.01 * k as f64, -0.2]);
            assert_abs_diff_eq!(
                eval_ml_control(&ml.policy, k, &x),
                eval_sl_control(&sl.policy, k, &x),
                epsilon = 1e-8
            );
        }
        assert_relative_eq!(ml.transport_objective, sl.cost(), max_relative = 1e-6);
    }

    #[test]
    fn plan_marginals_match_component_weights() {
        let model = DoubleIntegrator::new(0.1).unwrap();
        let grid = TimeGrid::uniform(1.0, 15).unwrap();
        let third = 1.0 / 3.0;
        let gmm0 = GmmDistribution::new(vec![
            gaussian(third, &[-1.0, 0.0], &[0.05, 0.02]),
            gaussian(third, &[0.0, 0.1], &[0.05, 0.02]),
            gaussian(third, &[1.0, -0.1], &[0.05, 0.02]),
        ])
        .unwrap();
        let gmm_t = GmmDistribution::new(vec![
            gaussian(0.5, &[2.0, 0.0], &[0.01, 0.01]),
            gaussian(0.5, &[3.0, 0.0], &[0.01, 0.01]),
        ])
        .unwrap();
        let ml = build_ml_policy(&model, &gmm0, &gmm_t, &grid, &quick_options()).unwrap();
        assert!(ml.policy.bridges().len() <= 6);
        assert!(ml.failed_pairs.is_empty());
        for sum in ml.plan.row_sums() {
            assert_abs_diff_eq!(sum, third, epsilon = 1e-9);
        }
        for sum in ml.plan.column_sums() {
            assert_abs_diff_eq!(sum, 0.5, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(ml.policy.lambdas().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mirror_symmetric_scenarios_get_mirror_symmetric_plans() {
        let model = DoubleIntegrator::new(0.1).unwrap();
        let grid = TimeGrid::uniform(1.0, 15).unwrap();
        let gmm0 = GmmDistribution::new(vec![
            gaussian(0.5, &[-1.0, 0.0], &[0.05, 0.02]),
            gaussian(0.5, &[1.0, 0.0], &[0.05, 0.02]),
        ])
        .unwrap();
        let gmm_t = GmmDistribution::new(vec![
            gaussian(0.5, &[-2.0, 0.0], &[0.01, 0.01]),
            gaussian(0.5, &[2.0, 0.0], &[0.01, 0.01]),
        ])
        .unwrap();
        let ml = build_ml_policy(&model, &gmm0, &gmm_t, &grid, &quick_options()).unwrap();
        // reflecting both boundaries through the origin swaps the
        // component labels, so costs must satisfy C_ij = C_(1-i)(1-j)
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(
                    ml.pair_costs[(i, j)],
                    ml.pair_costs[(1 - i, 1 - j)],
                    max_relative = 1e-6
                );
            }
        }
        let lam = ml.plan.lambdas();
        assert_relative_eq!(lam[(0, 0)], lam[(1, 1)], max_relative = 1e-9);
        assert_relative_eq!(lam[(0, 1)], lam[(1, 0)], max_relative = 1e-9);
    }

    #[test]
    fn forced_mass_on_a_failed_pair_aborts() {
        // unactuated scalar model: the mean problem has no control
        // authority, so the single pair fails and the plan has nowhere
        // else to put its mass
        let model = crate::dynamics::LinearDynamics::new(
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let gmm0 = GmmDistribution::new(vec![gaussian(1.0, &[0.0], &[0.1])]).unwrap();
        let gmm_t = GmmDistribution::new(vec![gaussian(1.0, &[1.0], &[0.1])]).unwrap();
        let err = match build_ml_policy(&model, &gmm0, &gmm_t, &grid, &quick_options()) {
            Err(e) => e,
            Ok(_) => panic!("expected the pipeline to abort"),
        };
        assert!(matches!(err, Error::Pair { i: 0, j: 0, .. }), "got {err}");
    }

    #[test]
    fn relinearization_stops_once_the_mean_settles() {
        let model = DoubleIntegrator::new(0.1).unwrap();
        let grid = TimeGrid::uniform(1.0, 15).unwrap();
        let gmm0 = GmmDistribution::new(vec![gaussian(1.0, &[0.0, 0.0], &[0.1, 0.05])]).unwrap();
        let gmm_t = GmmDistribution::new(vec![gaussian(1.0, &[1.0, 0.0], &[0.02, 0.01])]).unwrap();
        let mut options = quick_options();
        options.relinearize_iters = 3;
        let sl = build_sl_policy(&model, &gmm0, &gmm_t, &grid, &options).unwrap();
        // the mean problem is solved to stationarity on the first pass,
        // so one verification round suffices
        assert_eq!(sl.relinearizations, 1);
        let plain = build_sl_policy(&model, &gmm0, &gmm_t, &grid, &quick_options()).unwrap();
        assert_relative_eq!(sl.cost(), plain.cost(), max_relative = 1e-9);
    }
}
