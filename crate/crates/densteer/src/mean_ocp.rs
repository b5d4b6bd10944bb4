//! Minimum-energy reference trajectories between two state means.
//!
//! Solves  min ∫ ‖ū‖² dt  subject to  μ̇ = f(μ) + B ū,  μ(0) = μ_a,
//! μ(T) = μ_b  by sequential quadratic programming on a trapezoidal
//! collocation of the dynamics, with piecewise-constant controls.
//!
//! Each iteration linearizes the defects
//!   c_k = x_{k+1} − x_k − (Δt/2)(f(x_k) + f(x_{k+1})) − Δt B u_k
//! into the transition form  δx_{k+1} = E_k δx_k + F_k δu_k + r_k, eliminates
//! the states, and reduces the step computation to one n×n Gramian solve.
//! Steps are globalized by a backtracking line search on the ℓ1 merit
//! function J + σ(Σ‖c_k‖₁ + ‖boundary residual‖₁).

use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::ltv::TimeGrid;
use nalgebra::{DMatrix, DVector};

/// A state/control sequence on a time grid: N states, N−1 interval controls.
#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

/// Boundary-value problem for one reference trajectory.
pub struct MeanOcpProblem<'a> {
    pub model: &'a dyn Dynamics,
    pub grid: TimeGrid,
    pub start: DVector<f64>,
    pub goal: DVector<f64>,
    pub initial_guess: Option<ReferenceTrajectory>,
}

#[derive(Debug, Clone)]
pub struct MeanOcpOptions {
    /// Largest collocation defect allowed at convergence (∞-norm).
    pub defect_tol: f64,
    /// Largest terminal boundary residual allowed at convergence (∞-norm).
    pub boundary_tol: f64,
    pub max_iterations: usize,
    /// Step size below which a feasible iterate counts as stationary.
    pub step_tol: f64,
}

impl Default for MeanOcpOptions {
    fn default() -> Self {
        Self {
            defect_tol: 1e-8,
            boundary_tol: 1e-8,
            max_iterations: 200,
            step_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MeanOcpSolution {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    /// Σ_k ‖ū_k‖² Δt at the returned iterate.
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub max_defect: f64,
    pub boundary_residual: f64,
    /// Merit value after every accepted step.
    pub merit_history: Vec<f64>,
}

impl MeanOcpSolution {
    pub fn reference(&self) -> ReferenceTrajectory {
        ReferenceTrajectory {
            states: self.states.clone(),
            controls: self.controls.clone(),
        }
    }
}

/// Warm start for `solve_reference`.
///
/// For the planar two-body model this sweeps radius and angle linearly
/// between the boundary positions (a half-ellipse-like arc for a transfer
/// between circular orbits) and takes velocities consistent with that path;
/// the endpoints keep the exact boundary states.  Any other model gets a
/// straight-line state interpolation.  Controls start at zero.  The guess is
/// not dynamically feasible; it only seeds the solver.
pub fn hohmann_initial_guess(
    model: &dyn Dynamics,
    grid: &TimeGrid,
    start: &DVector<f64>,
    goal: &DVector<f64>,
) -> ReferenceTrajectory {
    let n = grid.len();
    let m = model.control_dim();
    let controls = vec![DVector::zeros(m); n - 1];
    let mut states = Vec::with_capacity(n);

    if model.name() == "two_body_2d" && start.len() == 4 {
        let r0 = (start[0] * start[0] + start[1] * start[1]).sqrt();
        let r1 = (goal[0] * goal[0] + goal[1] * goal[1]).sqrt();
        let th0 = start[1].atan2(start[0]);
        let th1 = goal[1].atan2(goal[0]);
        // Prograde sweep: advance counterclockwise from θ0 to θ1.
        let mut dth = th1 - th0;
        while dth <= 0.0 {
            dth += 2.0 * std::f64::consts::PI;
        }
        let horizon = grid.horizon();
        for k in 0..n {
            if k == 0 {
                states.push(start.clone());
                continue;
            }
            if k == n - 1 {
                states.push(goal.clone());
                continue;
            }
            let s = grid.node(k) / horizon;
            let r = r0 + (r1 - r0) * s;
            let th = th0 + dth * s;
            let (sin, cos) = th.sin_cos();
            let rdot = (r1 - r0) / horizon;
            let thdot = dth / horizon;
            states.push(DVector::from_vec(vec![
                r * cos,
                r * sin,
                rdot * cos - r * thdot * sin,
                rdot * sin + r * thdot * cos,
            ]));
        }
    } else {
        for k in 0..n {
            let s = grid.node(k) / grid.horizon();
            states.push(start * (1.0 - s) + goal * s);
        }
    }
    ReferenceTrajectory { states, controls }
}

/// Solves the two-point boundary value problem.  Non-convergence within the
/// iteration budget is not an error: the best iterate comes back with
/// `converged == false` and its residuals filled in.
pub fn solve_reference(
    problem: &MeanOcpProblem<'_>,
    options: &MeanOcpOptions,
) -> Result<MeanOcpSolution> {
    let model = problem.model;
    let grid = &problem.grid;
    let n_nodes = grid.len();
    if n_nodes < 3 {
        return Err(Error::Invalid {
            what: "time grid",
            why: "reference solve needs at least 3 nodes".into(),
        });
    }
    let n = model.state_dim();
    if problem.start.len() != n || problem.goal.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "boundary states have dimensions {} and {}, model has {}",
            problem.start.len(),
            problem.goal.len(),
            n
        )));
    }
    let dt = grid.dt();

    let guess = match &problem.initial_guess {
        Some(g) => g.clone(),
        None => hohmann_initial_guess(model, grid, &problem.start, &problem.goal),
    };
    if guess.states.len() != n_nodes || guess.controls.len() != n_nodes - 1 {
        return Err(Error::DimensionMismatch(
            "initial guess does not match the time grid".into(),
        ));
    }
    let mut xs = guess.states;
    let mut us = guess.controls;
    xs[0] = problem.start.clone();

    let b = model.input_matrix().clone();
    let identity = DMatrix::<f64>::identity(n, n);

    let mut sigma = 1e-6f64;
    let mut merit_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    // The current iterate must have a finite drift everywhere.
    let mut drifts = eval_drifts(model, grid, &xs)?;

    for iter in 0..options.max_iterations {
        iterations = iter + 1;

        let defects = eval_defects(&xs, &us, &drifts, &b, dt);
        let boundary = &problem.goal - &xs[n_nodes - 1];
        let max_defect = inf_norm_all(&defects);
        let boundary_residual = boundary.amax();
        let feasible =
            max_defect <= options.defect_tol && boundary_residual <= options.boundary_tol;

        // Linearize the transitions: δx_{k+1} = E_k δx_k + F_k δu_k + r_k.
        let mut jacobians = Vec::with_capacity(n_nodes);
        for k in 0..n_nodes {
            jacobians.push(model.jacobian(grid.node(k), &xs[k])?);
        }
        let mut es = Vec::with_capacity(n_nodes - 1);
        let mut fs = Vec::with_capacity(n_nodes - 1);
        let mut rs = Vec::with_capacity(n_nodes - 1);
        for k in 0..n_nodes - 1 {
            let m_next = &identity - &jacobians[k + 1] * (0.5 * dt);
            let lu = nalgebra::linalg::LU::new(m_next);
            let left = &identity + &jacobians[k] * (0.5 * dt);
            let e = lu.solve(&left).ok_or(Error::SolverFailure {
                status: "implicit trapezoidal step matrix is singular".into(),
            })?;
            let f = lu.solve(&(&b * dt)).unwrap();
            let r = lu.solve(&(-&defects[k])).unwrap();
            es.push(e);
            fs.push(f);
            rs.push(r);
        }

        // Chain the transitions into the terminal map:
        //   δx_{N−1} = Σ_k G_k δu_k + w,  G_k = T_{k+1} F_k.
        let mut t_chain = vec![identity.clone(); n_nodes];
        for k in (0..n_nodes - 1).rev() {
            t_chain[k] = &t_chain[k + 1] * &es[k];
        }
        let mut gs = Vec::with_capacity(n_nodes - 1);
        let mut w = DVector::zeros(n);
        for k in 0..n_nodes - 1 {
            gs.push(&t_chain[k + 1] * &fs[k]);
            w += &t_chain[k + 1] * &rs[k];
        }
        let h = &boundary - &w;

        // Least-energy step: δu_k = −u_k + G_kᵀ ν / (2Δt).
        let mut gramian = DMatrix::zeros(n, n);
        let mut g_u = DVector::zeros(n);
        for k in 0..n_nodes - 1 {
            gramian += &gs[k] * gs[k].transpose();
            g_u += &gs[k] * &us[k];
        }
        let rhs = (&h + &g_u) * (2.0 * dt);
        let Some(nu) = crate::linalg::solve_spd(&gramian, &rhs) else {
            log::warn!("steering Gramian is rank deficient; stopping at the current iterate");
            break;
        };
        let mut dus = Vec::with_capacity(n_nodes - 1);
        for k in 0..n_nodes - 1 {
            dus.push(gs[k].transpose() * &nu / (2.0 * dt) - &us[k]);
        }
        let step_size = dus.iter().map(|d| d.amax()).fold(0.0f64, f64::max);
        let control_scale = 1.0 + us.iter().map(|u| u.amax()).fold(0.0f64, f64::max);
        if feasible && step_size <= options.step_tol * control_scale {
            converged = true;
            break;
        }

        // State increments from the linearized transitions.
        let mut dxs = vec![DVector::zeros(n)];
        for k in 0..n_nodes - 1 {
            let next = &es[k] * &dxs[k] + &fs[k] * &dus[k] + &rs[k];
            dxs.push(next);
        }

        // Multiplier estimates drive the merit penalty weight:
        //   M_{N−1}ᵀ λ_{N−2} = ν,   M_jᵀ λ_{j−1} = (I + (Δt/2)A_j)ᵀ λ_j.
        let mut max_mult = nu.amax();
        let mt = (&identity - &jacobians[n_nodes - 1] * (0.5 * dt)).transpose();
        let mut lam = nalgebra::linalg::LU::new(mt)
            .solve(&nu)
            .unwrap_or_else(|| nu.clone());
        max_mult = max_mult.max(lam.amax());
        for j in (1..n_nodes - 1).rev() {
            let mt = (&identity - &jacobians[j] * (0.5 * dt)).transpose();
            let right = (&identity + &jacobians[j] * (0.5 * dt)).transpose() * &lam;
            lam = nalgebra::linalg::LU::new(mt)
                .solve(&right)
                .unwrap_or_else(|| right.clone());
            max_mult = max_mult.max(lam.amax());
        }
        sigma = sigma.max(2.0 * max_mult).max(1e-6);

        let objective = control_energy(&us, dt);
        let constraint_l1 = l1_norm_all(&defects) + boundary.abs().sum();
        let merit0 = objective + sigma * constraint_l1;
        let grad_dot: f64 = us
            .iter()
            .zip(&dus)
            .map(|(u, du)| 2.0 * dt * u.dot(du))
            .sum();
        let descent = grad_dot - sigma * constraint_l1;

        // Backtracking line search on the merit function.
        let mut alpha = 1.0f64;
        let mut accepted = false;
        while alpha >= 1e-12 {
            let trial_xs: Vec<DVector<f64>> = xs
                .iter()
                .zip(&dxs)
                .map(|(x, dx)| x + dx * alpha)
                .collect();
            let trial_us: Vec<DVector<f64>> = us
                .iter()
                .zip(&dus)
                .map(|(u, du)| u + du * alpha)
                .collect();
            if let Ok(trial_drifts) = eval_drifts(model, grid, &trial_xs) {
                let trial_defects = eval_defects(&trial_xs, &trial_us, &trial_drifts, &b, dt);
                let trial_boundary = &problem.goal - &trial_xs[n_nodes - 1];
                let trial_merit = control_energy(&trial_us, dt)
                    + sigma * (l1_norm_all(&trial_defects) + trial_boundary.abs().sum());
                let threshold = if descent < 0.0 {
                    merit0 + 0.1 * alpha * descent
                } else {
                    merit0
                };
                if trial_merit <= threshold {
                    xs = trial_xs;
                    us = trial_us;
                    drifts = trial_drifts;
                    merit_history.push(trial_merit);
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            log::warn!("line search stalled at iteration {}", iterations);
            break;
        }
    }

    let defects = eval_defects(&xs, &us, &drifts, &b, dt);
    let boundary = &problem.goal - &xs[n_nodes - 1];
    let max_defect = inf_norm_all(&defects);
    let boundary_residual = boundary.amax();
    if !converged {
        log::debug!(
            "reference solve stopped after {iterations} iterations \
             (defect {max_defect:.3e}, boundary {boundary_residual:.3e})"
        );
    }

    Ok(MeanOcpSolution {
        objective: control_energy(&us, dt),
        states: xs,
        controls: us,
        converged,
        iterations,
        max_defect,
        boundary_residual,
        merit_history,
    })
}

fn eval_drifts(
    model: &dyn Dynamics,
    grid: &TimeGrid,
    xs: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    xs.iter()
        .enumerate()
        .map(|(k, x)| model.drift(grid.node(k), x))
        .collect()
}

fn eval_defects(
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    drifts: &[DVector<f64>],
    b: &DMatrix<f64>,
    dt: f64,
) -> Vec<DVector<f64>> {
    (0..us.len())
        .map(|k| {
            &xs[k + 1]
                - &xs[k]
                - (&drifts[k] + &drifts[k + 1]) * (0.5 * dt)
                - b * &us[k] * dt
        })
        .collect()
}

fn control_energy(us: &[DVector<f64>], dt: f64) -> f64 {
    us.iter().map(|u| u.norm_squared() * dt).sum()
}

fn inf_norm_all(vs: &[DVector<f64>]) -> f64 {
    vs.iter().map(|v| v.amax()).fold(0.0, f64::max)
}

fn l1_norm_all(vs: &[DVector<f64>]) -> f64 {
    vs.iter().map(|v| v.abs().sum()).sum()
}
