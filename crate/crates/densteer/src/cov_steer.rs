//! Optimal covariance steering along a linearized trajectory.
//!
//! Steers the deviation covariance of  δẋ = A(t) δx + B u + D ẇ  from Σ_a to
//! Σ_b while minimizing  ∫ tr(R Y_t) dt, where Y_t ⪰ K_t Σ_t K_tᵀ is the
//! second moment of the feedback input.  With U_t = K_t Σ_t the covariance
//! flow is affine in (Σ, U, Y), and the relaxation
//!
//!   min Σ_k Δt tr(R Y_k)
//!   s.t. Σ_{k+1} = Σ_k + Δt (A_k Σ_k + Σ_k A_kᵀ + B U_k + U_kᵀ Bᵀ) + Q̄_k
//!        [[Σ_k, U_kᵀ], [U_k, Y_k]] ⪰ 0,   Σ_0 = Σ_a,  Σ_{N−1} = Σ_b
//!
//! is a semidefinite program whose LMI is tight at the optimum, so the gains
//! recover exactly as K_k = U_k Σ_k⁻¹.  Q̄_k = (D Dᵀ + ε) Δt carries the
//! process noise plus a small regularization that keeps every Σ_k invertible.
//!
//! Boundary covariances can live at wildly different magnitudes from unity
//! (interplanetary position variances in AU² are ~1e-9), so the program is
//! solved after a uniform rescaling Σ → κΣ with κ chosen so the largest
//! boundary entry becomes one; gains are invariant under that rescaling and
//! costs scale linearly, so the solution maps back exactly.

use crate::error::{Error, Result};
use crate::linalg::{self, tri_len};
use crate::ltv::{LtvTrajectory, TimeGrid};
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

/// First-order discretization of the covariance flow on one grid:
/// Σ_{k+1} = Φ_k Σ_k Φ_kᵀ + Γ_k U-terms + Q_k up to O(Δt²), realized here as
/// Φ_k = I + Δt A_k, Γ_k = Δt B, Q_k = (D Dᵀ + ε) Δt.
#[derive(Debug, Clone)]
pub struct DiscreteLtv {
    pub phi: Vec<DMatrix<f64>>,
    pub gamma: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub dt: f64,
}

/// Builds the per-interval transition data from node Jacobians.
pub fn discretize_ltv(
    a: &[DMatrix<f64>],
    b: &DMatrix<f64>,
    d: &DMatrix<f64>,
    epsilon: &DMatrix<f64>,
    grid: &TimeGrid,
) -> Result<DiscreteLtv> {
    if a.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} Jacobians for {} nodes",
            a.len(),
            grid.len()
        )));
    }
    let n = b.nrows();
    if epsilon.nrows() != n || epsilon.ncols() != n {
        return Err(Error::DimensionMismatch(
            "noise regularization does not match the state dimension".into(),
        ));
    }
    let dt = grid.dt();
    let identity = DMatrix::<f64>::identity(n, n);
    let q_step = (d * d.transpose() + epsilon) * dt;
    let mut phi = Vec::with_capacity(grid.interval_count());
    for k in 0..grid.interval_count() {
        phi.push(&identity + &a[k] * dt);
    }
    Ok(DiscreteLtv {
        phi,
        gamma: vec![b * dt; grid.interval_count()],
        q: vec![q_step; grid.interval_count()],
        dt,
    })
}

/// One covariance-steering subproblem.
pub struct OcsSdpProblem<'a> {
    pub ltv: &'a LtvTrajectory,
    pub sigma_start: DMatrix<f64>,
    pub sigma_end: DMatrix<f64>,
    /// Weight R in the running cost tr(R Y); identity when absent.
    pub control_weight: Option<DMatrix<f64>>,
    /// PSD matrix ε added to D Dᵀ in the covariance recursion.
    pub noise_regularization: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct OcsOptions {
    /// Feasibility and duality-gap tolerance handed to the conic solver.
    pub tol: f64,
    pub max_iterations: u32,
    pub verbose: bool,
}

impl Default for OcsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iterations: 200,
            verbose: false,
        }
    }
}

/// Largest boundary-covariance equality residual tolerated, Frobenius norm.
pub const BOUNDARY_RESIDUAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct OcsSolution {
    /// Σ_k at every node.
    pub covariances: Vec<DMatrix<f64>>,
    /// U_k = K_k Σ_k on every interval.
    pub feedback_inputs: Vec<DMatrix<f64>>,
    /// Y_k on every interval.
    pub control_second_moments: Vec<DMatrix<f64>>,
    /// K_k = U_k Σ_k⁻¹ on every interval.
    pub gains: Vec<DMatrix<f64>>,
    /// Σ_k Δt tr(R Y_k).
    pub cost: f64,
    pub solver_status: String,
}

struct ConicData {
    num_vars: usize,
    objective: Vec<f64>,
    /// (row, col) → coefficient of the constraint matrix.
    entries: BTreeMap<(usize, usize), f64>,
    rhs: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
    /// Covariance rescaling Σ' = κ Σ applied before solving.
    kappa: f64,
}

/// Column-major upper-triangle offset of entry (r, c), r ≤ c.
fn sym_offset(r: usize, c: usize) -> usize {
    debug_assert!(r <= c);
    c * (c + 1) / 2 + r
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

fn build_conic(problem: &OcsSdpProblem<'_>) -> Result<ConicData> {
    let ltv = problem.ltv;
    let n = ltv.state_dim();
    let m = ltv.control_dim();
    let nodes = ltv.grid.len();
    let intervals = nodes - 1;
    let dt = ltv.grid.dt();
    let tn = tri_len(n);
    let tq = tri_len(n + m);

    for (name, s) in [("start", &problem.sigma_start), ("end", &problem.sigma_end)] {
        if s.nrows() != n || s.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "{name} covariance is {}x{}, state dimension is {n}",
                s.nrows(),
                s.ncols()
            )));
        }
        if !linalg::is_symmetric(s, 1e-12) {
            return Err(Error::Invalid {
                what: "boundary covariance",
                why: format!("{name} covariance is not symmetric"),
            });
        }
    }
    let r_weight = match &problem.control_weight {
        Some(r) => {
            if r.nrows() != m || r.ncols() != m {
                return Err(Error::DimensionMismatch(
                    "control weight does not match the control dimension".into(),
                ));
            }
            linalg::symmetrize(r)
        }
        None => DMatrix::identity(m, m),
    };

    let scale = problem.sigma_start.amax().max(problem.sigma_end.amax());
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Invalid {
            what: "boundary covariance",
            why: "has no positive entries".into(),
        });
    }
    let kappa = 1.0 / scale;

    let q_bar = (&ltv.d * ltv.d.transpose() + &problem.noise_regularization) * (dt * kappa);

    let num_vars = nodes * tn + intervals * m * n + intervals * tri_len(m);
    let sigma_var = |k: usize, r: usize, c: usize| k * tn + sym_offset(r, c);
    let u_base = nodes * tn;
    let u_var = |k: usize, a: usize, c: usize| u_base + k * m * n + c * m + a;
    let y_base = u_base + intervals * m * n;
    let y_var = |k: usize, r: usize, c: usize| y_base + k * tri_len(m) + sym_offset(r, c);

    let mut objective = vec![0.0; num_vars];
    for k in 0..intervals {
        for c in 0..m {
            for r in 0..=c {
                let w = if r == c { 1.0 } else { 2.0 };
                objective[y_var(k, r, c)] = w * r_weight[(r, c)] * dt;
            }
        }
    }

    let eq_rows = 2 * tn + intervals * tn;
    let psd_rows = nodes * tn + intervals * tq;
    let mut rhs = vec![0.0; eq_rows + psd_rows];
    let mut entries: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let add = |entries: &mut BTreeMap<(usize, usize), f64>, row: usize, col: usize, v: f64| {
        if v != 0.0 {
            *entries.entry((row, col)).or_insert(0.0) += v;
        }
    };

    // Boundary equalities on Σ_0 and Σ_{N−1}.
    for c in 0..n {
        for r in 0..=c {
            let row0 = sym_offset(r, c);
            add(&mut entries, row0, sigma_var(0, r, c), 1.0);
            rhs[row0] = kappa * problem.sigma_start[(r, c)];
            let row1 = tn + sym_offset(r, c);
            add(&mut entries, row1, sigma_var(nodes - 1, r, c), 1.0);
            rhs[row1] = kappa * problem.sigma_end[(r, c)];
        }
    }

    // Covariance recursion equalities, one per interval and triangle entry.
    for k in 0..intervals {
        let a_k = &ltv.a[k];
        for c in 0..n {
            for r in 0..=c {
                let row = 2 * tn + k * tn + sym_offset(r, c);
                add(&mut entries, row, sigma_var(k + 1, r, c), 1.0);
                add(&mut entries, row, sigma_var(k, r, c), -1.0);
                for l in 0..n {
                    // −Δt (A Σ)[r,c] and −Δt (Σ Aᵀ)[r,c]
                    add(
                        &mut entries,
                        row,
                        sigma_var(k, l.min(c), l.max(c)),
                        -dt * a_k[(r, l)],
                    );
                    add(
                        &mut entries,
                        row,
                        sigma_var(k, l.min(r), l.max(r)),
                        -dt * a_k[(c, l)],
                    );
                }
                for a in 0..m {
                    // −Δt (B U)[r,c] and −Δt (Uᵀ Bᵀ)[r,c]
                    add(&mut entries, row, u_var(k, a, c), -dt * ltv.b[(r, a)]);
                    add(&mut entries, row, u_var(k, a, r), -dt * ltv.b[(c, a)]);
                }
                rhs[row] = q_bar[(r, c)];
            }
        }
    }

    // PSD cone rows: svec(Σ_k) ⪰ 0 and svec([[Σ, Uᵀ],[U, Y]]) ⪰ 0.
    // Upper triangle, column-major, off-diagonals scaled by √2; the slack is
    // s = b − A x, so variables enter with negative coefficients.
    let mut row = eq_rows;
    for k in 0..nodes {
        for c in 0..n {
            for r in 0..=c {
                let w = if r == c { 1.0 } else { SQRT2 };
                add(&mut entries, row, sigma_var(k, r, c), -w);
                row += 1;
            }
        }
    }
    for k in 0..intervals {
        for c in 0..(n + m) {
            for r in 0..=c {
                let w = if r == c { 1.0 } else { SQRT2 };
                let var = if c < n {
                    sigma_var(k, r, c)
                } else if r < n {
                    u_var(k, c - n, r)
                } else {
                    y_var(k, r - n, c - n)
                };
                add(&mut entries, row, var, -w);
                row += 1;
            }
        }
    }
    debug_assert_eq!(row, eq_rows + psd_rows);

    let mut cones = vec![SupportedConeT::ZeroConeT(eq_rows)];
    cones.extend((0..nodes).map(|_| SupportedConeT::PSDTriangleConeT(n)));
    cones.extend((0..intervals).map(|_| SupportedConeT::PSDTriangleConeT(n + m)));

    Ok(ConicData {
        num_vars,
        objective,
        entries,
        rhs,
        cones,
        kappa,
    })
}

fn to_csc(nrows: usize, ncols: usize, entries: &BTreeMap<(usize, usize), f64>) -> CscMatrix<f64> {
    // Entries keyed (row, col); regroup by column.
    let mut colptr = vec![0usize; ncols + 1];
    for &(_, col) in entries.keys() {
        colptr[col + 1] += 1;
    }
    for c in 0..ncols {
        colptr[c + 1] += colptr[c];
    }
    let nnz = entries.len();
    let mut rowval = vec![0usize; nnz];
    let mut nzval = vec![0.0f64; nnz];
    let mut cursor = colptr.clone();
    for (&(row, col), &v) in entries {
        let slot = cursor[col];
        rowval[slot] = row;
        nzval[slot] = v;
        cursor[col] += 1;
    }
    CscMatrix::new(nrows, ncols, colptr, rowval, nzval)
}

/// Solves the covariance-steering program and recovers the feedback gains.
/// Diagonal change of state coordinates x̃ = S⁻¹x that brings both
/// boundary covariances to unit scale per axis. The control space is
/// untouched, so the objective and the Y blocks are invariant; only
/// Σ, U, and the gains transform.
struct Equilibration {
    s: DVector<f64>,
    ltv: LtvTrajectory,
    sigma_start: DMatrix<f64>,
    sigma_end: DMatrix<f64>,
    noise_regularization: DMatrix<f64>,
    control_weight: Option<DMatrix<f64>>,
}

fn equilibrate(problem: &OcsSdpProblem<'_>) -> Result<Equilibration> {
    let ltv = problem.ltv;
    let n = ltv.state_dim();
    let mut s = DVector::from_fn(n, |i, _| {
        let v = 0.5 * (problem.sigma_start[(i, i)] + problem.sigma_end[(i, i)]);
        if v > 0.0 {
            v.sqrt()
        } else {
            1.0
        }
    });
    // normalize to unit geometric mean: S only evens out anisotropy,
    // the overall magnitude stays with the kappa rescaling
    let log_mean = s.iter().map(|v| v.ln()).sum::<f64>() / n as f64;
    s /= log_mean.exp();
    let smat = DMatrix::from_diagonal(&s);
    let sinv = DMatrix::from_diagonal(&s.map(|v| 1.0 / v));

    let a = ltv.a.iter().map(|a_k| &sinv * a_k * &smat).collect();
    let scaled_ltv = LtvTrajectory::new(
        ltv.grid.clone(),
        a,
        &sinv * &ltv.b,
        &sinv * &ltv.d,
        ltv.reference_states.clone(),
        ltv.reference_controls.clone(),
    )?;
    let scale_sym = |m: &DMatrix<f64>| &sinv * m * &sinv;
    Ok(Equilibration {
        s,
        ltv: scaled_ltv,
        sigma_start: scale_sym(&problem.sigma_start),
        sigma_end: scale_sym(&problem.sigma_end),
        noise_regularization: scale_sym(&problem.noise_regularization),
        control_weight: problem.control_weight.clone(),
    })
}

impl Equilibration {
    fn problem(&self) -> OcsSdpProblem<'_> {
        OcsSdpProblem {
            ltv: &self.ltv,
            sigma_start: self.sigma_start.clone(),
            sigma_end: self.sigma_end.clone(),
            control_weight: self.control_weight.clone(),
            noise_regularization: self.noise_regularization.clone(),
        }
    }
}

pub fn solve_ocs(problem: &OcsSdpProblem<'_>, options: &OcsOptions) -> Result<OcsSolution> {
    let equilibration = equilibrate(problem)?;
    let data = build_conic(&equilibration.problem())?;
    let nrows = data.rhs.len();
    let a = to_csc(nrows, data.num_vars, &data.entries);
    let p = CscMatrix::<f64>::zeros((data.num_vars, data.num_vars));
    let settings = DefaultSettingsBuilder::default()
        .verbose(options.verbose)
        .max_iter(options.max_iterations)
        .tol_gap_abs(options.tol)
        .tol_gap_rel(options.tol)
        .tol_feas(options.tol)
        .build()
        .map_err(|e| Error::SolverFailure {
            status: format!("bad solver settings: {e}"),
        })?;
    let mut solver = DefaultSolver::new(
        &p,
        &data.objective,
        &a,
        &data.rhs,
        &data.cones,
        settings,
    )
    .map_err(|e| Error::SolverFailure {
        status: format!("{e:?}"),
    })?;
    solver.solve();

    let status = solver.solution.status;
    match status {
        SolverStatus::Solved => {}
        SolverStatus::AlmostSolved => {
            log::warn!("conic solver finished with reduced accuracy");
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(Error::SdpInfeasible);
        }
        other => {
            return Err(Error::SolverFailure {
                status: format!("{other:?}"),
            });
        }
    }

    let ltv = problem.ltv;
    let n = ltv.state_dim();
    let m = ltv.control_dim();
    let nodes = ltv.grid.len();
    let intervals = nodes - 1;
    let tn = tri_len(n);
    let x = &solver.solution.x;
    let unscale = 1.0 / data.kappa;

    let unpack_sym = |base: usize, side: usize| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(side, side);
        for c in 0..side {
            for r in 0..=c {
                let v = x[base + sym_offset(r, c)] * unscale;
                out[(r, c)] = v;
                out[(c, r)] = v;
            }
        }
        out
    };

    let scaled_covariances: Vec<DMatrix<f64>> =
        (0..nodes).map(|k| unpack_sym(k * tn, n)).collect();
    let u_base = nodes * tn;
    let scaled_inputs: Vec<DMatrix<f64>> = (0..intervals)
        .map(|k| {
            DMatrix::from_fn(m, n, |a_, c_| x[u_base + k * m * n + c_ * m + a_] * unscale)
        })
        .collect();
    let y_base = u_base + intervals * m * n;
    let control_second_moments: Vec<DMatrix<f64>> = (0..intervals)
        .map(|k| unpack_sym(y_base + k * tri_len(m), m))
        .collect();

    // gains in equilibrated coordinates, where Σ is well conditioned
    let mut gains = Vec::with_capacity(intervals);
    for k in 0..intervals {
        let (chol, jitter) =
            linalg::cholesky_with_jitter(&scaled_covariances[k], 1e-12).ok_or_else(|| {
                Error::SolverFailure {
                    status: format!("planned covariance at node {k} is not invertible"),
                }
            })?;
        if jitter > 0.0 {
            log::debug!("gain recovery at node {k} used jitter {jitter:.3e}");
        }
        // K = U Σ⁻¹ via Σ Kᵀ = Uᵀ.
        gains.push(chol.solve(&scaled_inputs[k].transpose()).transpose());
    }

    // undo the state equilibration: Σ = S Σ̃ S, U = Ũ S, K = K̃ S⁻¹
    let s = &equilibration.s;
    let covariances = scaled_covariances
        .into_iter()
        .map(|mut c| {
            for r in 0..n {
                for col in 0..n {
                    c[(r, col)] *= s[r] * s[col];
                }
            }
            c
        })
        .collect::<Vec<_>>();
    let feedback_inputs = scaled_inputs
        .into_iter()
        .map(|mut u| {
            for col in 0..n {
                let f = s[col];
                u.column_mut(col).scale_mut(f);
            }
            u
        })
        .collect::<Vec<_>>();
    let gains = gains
        .into_iter()
        .map(|mut k_| {
            for col in 0..n {
                let f = 1.0 / s[col];
                k_.column_mut(col).scale_mut(f);
            }
            k_
        })
        .collect::<Vec<_>>();

    let solution = OcsSolution {
        covariances,
        feedback_inputs,
        control_second_moments,
        gains,
        cost: solver.solution.obj_val * unscale,
        solver_status: format!("{status:?}"),
    };

    let (res_start, res_end) =
        boundary_residuals(&solution, &problem.sigma_start, &problem.sigma_end);
    let tol = BOUNDARY_RESIDUAL_TOL * (1.0 + problem.sigma_start.amax().max(problem.sigma_end.amax()));
    if res_start > tol || res_end > tol {
        return Err(Error::SolverFailure {
            status: format!(
                "boundary covariance residuals {res_start:.3e}/{res_end:.3e} exceed tolerance"
            ),
        });
    }
    Ok(solution)
}

fn boundary_residuals(
    solution: &OcsSolution,
    sigma_start: &DMatrix<f64>,
    sigma_end: &DMatrix<f64>,
) -> (f64, f64) {
    (
        (solution.covariances.first().unwrap() - sigma_start).norm(),
        (solution.covariances.last().unwrap() - sigma_end).norm(),
    )
}

/// Renders the scaled conic program in a plain-text form: dimensions, the
/// objective and right-hand-side nonzeros, the constraint triplets, and the
/// cone list.
pub fn dump_conic(problem: &OcsSdpProblem<'_>) -> Result<String> {
    use std::fmt::Write;
    let equilibration = equilibrate(problem)?;
    let data = build_conic(&equilibration.problem())?;
    let mut out = String::new();
    writeln!(out, "conic program (covariance rescaling kappa = {:.6e})", data.kappa).unwrap();
    write!(out, "state equilibration diag").unwrap();
    for v in equilibration.s.iter() {
        write!(out, " {v:.16e}").unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "variables {}", data.num_vars).unwrap();
    writeln!(out, "rows {}", data.rhs.len()).unwrap();
    write!(out, "cones").unwrap();
    for cone in &data.cones {
        match cone {
            SupportedConeT::ZeroConeT(d) => write!(out, " zero({d})").unwrap(),
            SupportedConeT::PSDTriangleConeT(d) => write!(out, " psd({d})").unwrap(),
            other => write!(out, " {other:?}").unwrap(),
        }
    }
    writeln!(out).unwrap();
    writeln!(out, "objective nonzeros (index value):").unwrap();
    for (i, v) in data.objective.iter().enumerate() {
        if *v != 0.0 {
            writeln!(out, "{i} {v:.16e}").unwrap();
        }
    }
    writeln!(out, "constraint triplets (row col value):").unwrap();
    for (&(r, c), v) in &data.entries {
        writeln!(out, "{r} {c} {v:.16e}").unwrap();
    }
    writeln!(out, "rhs nonzeros (index value):").unwrap();
    for (i, v) in data.rhs.iter().enumerate() {
        if *v != 0.0 {
            writeln!(out, "{i} {v:.16e}").unwrap();
        }
    }
    Ok(out)
}

/// Minimum-energy feedforward for the discretized linear deviation dynamics:
/// steers the mean of  x_{k+1} = Φ_k x_k + Γ_k v_k  from μ_a to μ_b with the
/// least Σ‖v_k‖²Δt, via the steering Gramian of the transition chain.
pub fn linear_mean_feedforward(
    ltv: &LtvTrajectory,
    mu_start: &DVector<f64>,
    mu_end: &DVector<f64>,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let n = ltv.state_dim();
    if mu_start.len() != n || mu_end.len() != n {
        return Err(Error::DimensionMismatch(
            "boundary means do not match the state dimension".into(),
        ));
    }
    let intervals = ltv.grid.interval_count();
    let dt = ltv.grid.dt();
    let identity = DMatrix::<f64>::identity(n, n);
    let phis: Vec<DMatrix<f64>> = (0..intervals).map(|k| &identity + &ltv.a[k] * dt).collect();

    // T_j maps a deviation at node j to the terminal node.
    let mut t_chain = vec![identity.clone(); intervals + 1];
    for k in (0..intervals).rev() {
        t_chain[k] = &t_chain[k + 1] * &phis[k];
    }
    let gs: Vec<DMatrix<f64>> = (0..intervals)
        .map(|k| &t_chain[k + 1] * &ltv.b * dt)
        .collect();
    let mut gramian = DMatrix::<f64>::zeros(n, n);
    for g in &gs {
        gramian += g * g.transpose();
    }
    let (lo, hi) = linalg::sym_eigen_range(&gramian);
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(Error::UncontrollablePair);
    }
    let target = mu_end - &t_chain[0] * mu_start;
    let nu = linalg::solve_spd(&gramian, &target).ok_or(Error::UncontrollablePair)?;

    let mut controls = Vec::with_capacity(intervals);
    let mut means = vec![mu_start.clone()];
    for k in 0..intervals {
        let v = gs[k].transpose() * &nu;
        let next = &phis[k] * &means[k] + &ltv.b * &v * dt;
        means.push(next);
        controls.push(v);
    }
    let residual = (means.last().unwrap() - mu_end).amax();
    if residual > 1e-8 * (1.0 + mu_end.amax()) {
        return Err(Error::SolverFailure {
            status: format!("feedforward endpoint residual {residual:.3e}"),
        });
    }
    Ok((controls, means))
}
