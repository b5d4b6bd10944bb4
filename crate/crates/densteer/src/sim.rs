//! Euler-Maruyama Monte Carlo propagation of the controlled SDE under a
//! feedback policy, with per-particle cost accounting.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::gmm::GmmDistribution;
use crate::ltv::TimeGrid;
use crate::policy::ControlPolicy;

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub particles: usize,
    pub seed: u64,
    /// Euler substeps per grid interval; the control is held constant
    /// across the whole interval either way.
    pub substeps: usize,
    /// State norm beyond which a particle counts as diverged.
    pub divergence_threshold: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            particles: 200,
            seed: 0,
            substeps: 1,
            divergence_threshold: 1e3,
        }
    }
}

/// One particle's sampled trajectory. After a divergence the state is
/// frozen, later controls are zero, and the cost stops accumulating.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticlePath {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
    /// Node index at which propagation failed, when it did.
    pub diverged_at: Option<usize>,
}

impl ParticlePath {
    pub fn is_diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub grid: TimeGrid,
    pub paths: Vec<ParticlePath>,
    pub seed: u64,
}

impl SimulationResult {
    pub fn particle_count(&self) -> usize {
        self.paths.len()
    }

    pub fn diverged_count(&self) -> usize {
        self.paths.iter().filter(|p| p.is_diverged()).count()
    }

    /// Terminal states of the particles that survived propagation.
    pub fn surviving_terminal_states(&self) -> Vec<DVector<f64>> {
        self.paths
            .iter()
            .filter(|p| !p.is_diverged())
            .map(|p| p.states.last().expect("paths are non-empty").clone())
            .collect()
    }
}

/// Mean control cost over the surviving particles.
pub fn estimate_cost(result: &SimulationResult) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for path in &result.paths {
        if !path.is_diverged() {
            total += path.cost;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoData("every particle diverged".into()));
    }
    Ok(total / count as f64)
}

/// Propagates `options.particles` samples of gmm0 through
///   x_{k+1} = x_k + Δt (f(x_k) + B u_k) + D √Δt ξ_k
/// under the policy's zero-order-hold control. Each particle owns one
/// counter-based RNG stream, so results do not depend on how the
/// particles are scheduled across threads.
pub fn simulate(
    model: &dyn Dynamics,
    policy: &dyn ControlPolicy,
    gmm0: &GmmDistribution,
    grid: &TimeGrid,
    options: &SimOptions,
) -> Result<SimulationResult> {
    if options.particles == 0 {
        return Err(Error::Invalid {
            what: "particle count",
            why: "must be at least 1".into(),
        });
    }
    if options.substeps == 0 {
        return Err(Error::Invalid {
            what: "substeps",
            why: "must be at least 1".into(),
        });
    }
    if gmm0.dim() != model.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial mixture dimension {} does not match the model's {}",
            gmm0.dim(),
            model.state_dim()
        )));
    }
    if policy.interval_count() != grid.interval_count() {
        return Err(Error::DimensionMismatch(format!(
            "policy covers {} intervals, grid has {}",
            policy.interval_count(),
            grid.interval_count()
        )));
    }
    if policy.control_dim() != model.control_dim() {
        return Err(Error::DimensionMismatch(format!(
            "policy control dimension {} does not match the model's {}",
            policy.control_dim(),
            model.control_dim()
        )));
    }

    let paths: Vec<ParticlePath> = (0..options.particles)
        .into_par_iter()
        .map(|p| propagate_particle(model, policy, gmm0, grid, options, p))
        .collect();

    Ok(SimulationResult {
        grid: grid.clone(),
        paths,
        seed: options.seed,
    })
}

fn propagate_particle(
    model: &dyn Dynamics,
    policy: &dyn ControlPolicy,
    gmm0: &GmmDistribution,
    grid: &TimeGrid,
    options: &SimOptions,
    particle: usize,
) -> ParticlePath {
    let mut rng = ChaCha12Rng::seed_from_u64(options.seed);
    rng.set_stream(1 + particle as u64);

    let intervals = grid.interval_count();
    let noise_dim = model.noise_dim();
    let b = model.input_matrix();
    let d = model.noise_matrix();
    let zero_control = DVector::zeros(model.control_dim());

    let mut states = Vec::with_capacity(grid.len());
    let mut controls = Vec::with_capacity(intervals);
    let mut cost = 0.0;
    let mut diverged_at = None;

    let mut x = gmm0.draw(&mut rng);
    states.push(x.clone());

    for k in 0..intervals {
        if diverged_at.is_some() {
            states.push(x.clone());
            controls.push(zero_control.clone());
            continue;
        }
        let dt = grid.node(k + 1) - grid.node(k);
        let u = policy.control(k, &x);
        let sub_dt = dt / options.substeps as f64;
        let sqrt_sub_dt = sub_dt.sqrt();
        let forcing = b * &u;
        let mut failed = false;
        for s in 0..options.substeps {
            let t = grid.node(k) + s as f64 * sub_dt;
            match model.drift(t, &x) {
                Ok(f) => {
                    let xi = DVector::from_fn(noise_dim, |_, _| rng.sample(StandardNormal));
                    x += (f + &forcing) * sub_dt + d * xi * sqrt_sub_dt;
                }
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        let blew_up = !x.iter().all(|v| v.is_finite()) || x.norm() > options.divergence_threshold;
        if failed || blew_up {
            diverged_at = Some(k + 1);
            controls.push(zero_control.clone());
        } else {
            cost += u.norm_squared() * dt;
            controls.push(u);
        }
        states.push(x.clone());
    }

    ParticlePath {
        states,
        controls,
        cost,
        diverged_at,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearDynamics;
    use crate::metrics::empirical_moments;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::DMatrix;

    struct ConstantPolicy {
        value: DVector<f64>,
        intervals: usize,
    }

    impl ControlPolicy for ConstantPolicy {
        fn control_dim(&self) -> usize {
            self.value.len()
        }
        fn interval_count(&self) -> usize {
            self.intervals
        }
        fn control(&self, _k: usize, _x: &DVector<f64>) -> DVector<f64> {
            self.value.clone()
        }
    }

    fn point_mass(x: &[f64]) -> GmmDistribution {
        let n = x.len();
        GmmDistribution::single(DVector::from_row_slice(x), DMatrix::zeros(n, n)).unwrap()
    }

    fn noiseless(a: DMatrix<f64>) -> LinearDynamics {
        let n = a.nrows();
        LinearDynamics::new(a, DMatrix::identity(n, n), DMatrix::zeros(n, 1)).unwrap()
    }

    #[test]
    fn shear_flow_is_integrated_exactly() {
        // for a nilpotent generator the Euler product telescopes to the
        // exact flow map, so only rounding error remains
        let model = noiseless(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        let grid = TimeGrid::uniform(1.0, 101).unwrap();
        let policy = ConstantPolicy {
            value: DVector::zeros(2),
            intervals: 100,
        };
        let result = simulate(&model, &policy, &point_mass(&[1.0, 2.0]), &grid, &SimOptions {
            particles: 1,
            ..SimOptions::default()
        })
        .unwrap();
        let terminal = &result.paths[0].states[100];
        assert_abs_diff_eq!(terminal[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(terminal[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_flow_matches_its_exact_solution_to_first_order()
    {
        let model = noiseless(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        let grid = TimeGrid::uniform(1.0, 101).unwrap();
        let policy = ConstantPolicy {
            value: DVector::zeros(2),
            intervals: 100,
        };
        let run = |substeps| {
            let result = simulate(&model, &policy, &point_mass(&[1.0, 0.0]), &grid, &SimOptions {
                particles: 1,
                substeps,
                ..SimOptions::default()
            })
            .unwrap();
            let terminal = &result.paths[0].states[100];
            let exact = DVector::from_row_slice(&[1.0_f64.cos(), -(1.0_f64.sin())]);
            (terminal - exact).norm()
        };
        let coarse = run(1);
        assert!(coarse < 6e-3, "Euler error {coarse} too large");
        let fine = run(4);
        assert!(fine < coarse / 3.0, "substepping did not reduce the error");
    }

    #[test]
    fn constant_control_cost_is_a_riemann_sum_of_a_constant() {
        let model = noiseless(DMatrix::zeros(2, 2));
        let grid = TimeGrid::uniform(2.5, 51).unwrap();
        let policy = ConstantPolicy {
            value: DVector::from_row_slice(&[3.0, -4.0]),
            intervals: 50,
        };
        let result = simulate(&model, &policy, &point_mass(&[0.0, 0.0]), &grid, &SimOptions {
            particles: 3,
            ..SimOptions::default()
        })
        .unwrap();
        for path in &result.paths {
            assert_relative_eq!(path.cost, 25.0 * 2.5, max_relative = 1e-12);
        }
        assert_relative_eq!(estimate_cost(&result).unwrap(), 62.5, max_relative = 1e-12);
    }

    #[test]
    fn moments_follow_the_discrete_recursion() {
        // dx = A x dt + D dw with no control: the sampled moments must
        // match the exact recursion of the same discrete scheme
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -0.5]);
        let d = DMatrix::from_row_slice(2, 1, &[0.3, 0.1]);
        let model = LinearDynamics::new(a.clone(), DMatrix::identity(2, 2), d.clone()).unwrap();
        let grid = TimeGrid::uniform(1.0, 26).unwrap();
        let policy = ConstantPolicy {
            value: DVector::zeros(2),
            intervals: 25,
        };
        let gmm0 = GmmDistribution::single(
            DVector::from_row_slice(&[1.0, -1.0]),
            DMatrix::identity(2, 2) * 0.04,
        )
        .unwrap();
        let result = simulate(&model, &policy, &gmm0, &grid, &SimOptions {
            particles: 5000,
            seed: 4,
            ..SimOptions::default()
        })
        .unwrap();
        assert_eq!(result.diverged_count(), 0);

        let dt = grid.dt();
        let step = DMatrix::identity(2, 2) + &a * dt;
        let mut mean = DVector::from_row_slice(&[1.0, -1.0]);
        let mut cov = DMatrix::identity(2, 2) * 0.04;
        for _ in 0..25 {
            mean = &step * mean;
            cov = &step * cov * step.transpose() + &d * d.transpose() * dt;
        }
        let (sample_mean, sample_cov) = empirical_moments(&result.surviving_terminal_states()).unwrap();
        // 5000 particles: mean se ~ sqrt(cov/5000), covariance se ~ cov sqrt(2/5000)
        assert_abs_diff_eq!(sample_mean[0], mean[0], epsilon = 0.015);
        assert_abs_diff_eq!(sample_mean[1], mean[1], epsilon = 0.015);
        assert_relative_eq!(sample_cov[(0, 0)], cov[(0, 0)], max_relative = 0.12);
        assert_relative_eq!(sample_cov[(1, 1)], cov[(1, 1)], max_relative = 0.12);
    }

    #[test]
    fn results_do_not_depend_on_the_thread_count() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.3]);
        let d = DMatrix::from_row_slice(2, 1, &[0.2, 0.4]);
        let model = LinearDynamics::new(a, DMatrix::identity(2, 2), d).unwrap();
        let grid = TimeGrid::uniform(1.0, 21).unwrap();
        let gmm0 = GmmDistribution::single(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let options = SimOptions {
            particles: 64,
            seed: 11,
            ..SimOptions::default()
        };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let policy = ConstantPolicy {
                    value: DVector::from_row_slice(&[0.1, 0.0]),
                    intervals: 20,
                };
                simulate(&model, &policy, &gmm0, &grid, &options).unwrap()
            })
        };
        let serial = run(1);
        let parallel = run(8);
        assert_eq!(serial.paths, parallel.paths);
    }

    #[test]
    fn runaway_particles_are_flagged_and_frozen() {
        let model = noiseless(DMatrix::from_row_slice(1, 1, &[4.0]));
        let grid = TimeGrid::uniform(5.0, 41).unwrap();
        let policy = ConstantPolicy {
            value: DVector::zeros(1),
            intervals: 40,
        };
        let result = simulate(&model, &policy, &point_mass(&[1.0]), &grid, &SimOptions {
            particles: 2,
            ..SimOptions::default()
        })
        .unwrap();
        assert_eq!(result.diverged_count(), 2);
        let path = &result.paths[0];
        let stop = path.diverged_at.unwrap();
        assert!(path.states[stop].norm() > 1e3);
        // frozen from the divergence node onward
        assert_eq!(path.states[stop], path.states[40]);
        assert!(result.surviving_terminal_states().is_empty());
        assert!(matches!(estimate_cost(&result), Err(Error::NoData(_))));
    }

    #[test]
    fn cost_averages_skip_diverged_particles() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let path = |cost, diverged_at| ParticlePath {
            states: vec![DVector::zeros(1); 2],
            controls: vec![DVector::zeros(1); 1],
            cost,
            diverged_at,
        };
        let result = SimulationResult {
            grid,
            paths: vec![path(1.0, None), path(3.0, None), path(100.0, Some(1))],
            seed: 0,
        };
        assert_abs_diff_eq!(estimate_cost(&result).unwrap(), 2.0, epsilon = 1e-15);
    }
}
