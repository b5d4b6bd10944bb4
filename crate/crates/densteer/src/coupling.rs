//! Discrete optimal transport between mixture weights.
//!
//! Solves  min Σ_ij λ_ij c_ij  over couplings λ ≥ 0 with row sums α⁰ and
//! column sums αᵀ, by the transportation simplex (northwest-corner start,
//! dual variables from the basis tree, Bland's rule for entering and leaving
//! cells so the pivot sequence is deterministic and cannot cycle).

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Entries below this are treated as structural zeros of a plan.
pub const SUPPORT_EPS: f64 = 1e-12;

/// A coupling of two discrete marginals.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    lambdas: DMatrix<f64>,
}

impl TransportPlan {
    pub fn lambdas(&self) -> &DMatrix<f64> {
        &self.lambdas
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.lambdas.nrows())
            .map(|i| self.lambdas.row(i).sum())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.lambdas.ncols())
            .map(|j| self.lambdas.column(j).sum())
            .collect()
    }

    pub fn objective(&self, costs: &DMatrix<f64>) -> f64 {
        self.lambdas.zip_fold(costs, 0.0, |acc, l, c| acc + l * c)
    }

    /// Cells carrying more than `SUPPORT_EPS` mass.
    pub fn support(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.lambdas.nrows() {
            for j in 0..self.lambdas.ncols() {
                if self.lambdas[(i, j)] > SUPPORT_EPS {
                    out.push((i, j, self.lambdas[(i, j)]));
                }
            }
        }
        out
    }
}

/// Minimizes Σ λ_ij c_ij subject to the marginal constraints.
///
/// The marginals must be nonnegative and their totals must agree within
/// 1e-8.  The returned plan is a vertex of the transportation polytope, so
/// its support has at most N0 + N1 − 1 cells, and it satisfies the duality
/// certificate gap ≤ 1e-9 · max(1, |objective|).
pub fn solve_transport(
    costs: &DMatrix<f64>,
    alpha0: &[f64],
    alpha_t: &[f64],
) -> Result<TransportPlan> {
    let n0 = alpha0.len();
    let n1 = alpha_t.len();
    if n0 == 0 || n1 == 0 {
        return Err(Error::InvalidMarginals("a marginal is empty".into()));
    }
    if costs.nrows() != n0 || costs.ncols() != n1 {
        return Err(Error::DimensionMismatch(format!(
            "cost matrix is {}x{} but marginals have {} and {} atoms",
            costs.nrows(),
            costs.ncols(),
            n0,
            n1
        )));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Invalid {
            what: "transport costs",
            why: "contain a non-finite entry".into(),
        });
    }
    if alpha0.iter().chain(alpha_t.iter()).any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidMarginals("negative or non-finite weight".into()));
    }
    let sum0: f64 = alpha0.iter().sum();
    let sum1: f64 = alpha_t.iter().sum();
    if (sum0 - sum1).abs() > 1e-8 {
        return Err(Error::InvalidMarginals(format!(
            "totals {sum0} and {sum1} differ by more than 1e-8"
        )));
    }
    if sum0 <= 0.0 {
        return Err(Error::InvalidMarginals("total mass is zero".into()));
    }

    let mut simplex = Simplex::new(costs, alpha0, alpha_t);
    simplex.run()?;

    let plan = TransportPlan {
        lambdas: simplex.flows,
    };
    let gap = simplex.duality_gap;
    if gap > 1e-9 * plan.objective(costs).abs().max(1.0) {
        return Err(Error::SolverFailure {
            status: format!("transport duality gap {gap:.3e}"),
        });
    }
    Ok(plan)
}

struct Simplex {
    costs: DMatrix<f64>,
    flows: DMatrix<f64>,
    basis: Vec<Vec<bool>>,
    supply: Vec<f64>,
    demand: Vec<f64>,
    duality_gap: f64,
}

impl Simplex {
    fn new(costs: &DMatrix<f64>, alpha0: &[f64], alpha_t: &[f64]) -> Self {
        Self {
            costs: costs.clone(),
            flows: DMatrix::zeros(alpha0.len(), alpha_t.len()),
            basis: vec![vec![false; alpha_t.len()]; alpha0.len()],
            supply: alpha0.to_vec(),
            demand: alpha_t.to_vec(),
            duality_gap: f64::INFINITY,
        }
    }

    fn northwest_corner(&mut self) {
        let (n0, n1) = (self.supply.len(), self.demand.len());
        let mut remaining_supply = self.supply.clone();
        let mut remaining_demand = self.demand.clone();
        let (mut i, mut j) = (0, 0);
        loop {
            let q = remaining_supply[i].min(remaining_demand[j]);
            self.flows[(i, j)] = q;
            self.basis[i][j] = true;
            remaining_supply[i] -= q;
            remaining_demand[j] -= q;
            if i == n0 - 1 && j == n1 - 1 {
                break;
            }
            // On ties, exhaust the column first; keeps the basis a tree with
            // exactly n0 + n1 − 1 cells, zeros included.
            if remaining_demand[j] <= remaining_supply[i] && j < n1 - 1 {
                j += 1;
            } else {
                i += 1;
            }
        }
    }

    /// Dual variables from c_ij = u_i + v_j on the basis tree, rooted at u_0 = 0.
    fn duals(&self) -> (Vec<f64>, Vec<f64>) {
        let (n0, n1) = (self.supply.len(), self.demand.len());
        let mut u = vec![f64::NAN; n0];
        let mut v = vec![f64::NAN; n1];
        u[0] = 0.0;
        let mut queue = vec![(true, 0usize)];
        while let Some((is_row, idx)) = queue.pop() {
            if is_row {
                for j in 0..n1 {
                    if self.basis[idx][j] && v[j].is_nan() {
                        v[j] = self.costs[(idx, j)] - u[idx];
                        queue.push((false, j));
                    }
                }
            } else {
                for i in 0..n0 {
                    if self.basis[i][idx] && u[i].is_nan() {
                        u[i] = self.costs[(i, idx)] - v[idx];
                        queue.push((true, i));
                    }
                }
            }
        }
        (u, v)
    }

    /// Unique alternating cycle closed by the entering cell: the path from
    /// its column back to its row through the basis tree.
    fn cycle(&self, enter: (usize, usize)) -> Vec<(usize, usize)> {
        let (n0, n1) = (self.supply.len(), self.demand.len());
        // Nodes: rows 0..n0, then columns n0..n0+n1.  Parent search from the
        // entering row towards the entering column.
        let total = n0 + n1;
        let mut parent = vec![usize::MAX; total];
        let mut seen = vec![false; total];
        let start = enter.0;
        let target = n0 + enter.1;
        seen[start] = true;
        let mut frontier = vec![start];
        'bfs: while let Some(node) = frontier.pop() {
            if node < n0 {
                for j in 0..n1 {
                    let other = n0 + j;
                    if self.basis[node][j] && !seen[other] {
                        parent[other] = node;
                        seen[other] = true;
                        if other == target {
                            break 'bfs;
                        }
                        frontier.push(other);
                    }
                }
            } else {
                let j = node - n0;
                for i in 0..n0 {
                    if self.basis[i][j] && !seen[i] {
                        parent[i] = node;
                        seen[i] = true;
                        frontier.push(i);
                    }
                }
            }
        }
        let mut nodes = vec![target];
        while *nodes.last().unwrap() != start {
            nodes.push(parent[*nodes.last().unwrap()]);
        }
        // nodes: column j*, ..., row i*.  Consecutive pairs are basis cells.
        let mut cells = vec![enter];
        for w in nodes.windows(2) {
            let (a, b) = (w[0], w[1]);
            let cell = if a < n0 { (a, b - n0) } else { (b, a - n0) };
            cells.push(cell);
        }
        cells
    }

    fn run(&mut self) -> Result<()> {
        self.northwest_corner();
        let scale = self.costs.amax().max(1.0);
        let tol = 1e-12 * scale;
        let (n0, n1) = (self.supply.len(), self.demand.len());
        let max_pivots = 1000 * (n0 * n1 + 1);
        for _ in 0..max_pivots {
            let (u, v) = self.duals();
            let mut entering = None;
            'scan: for i in 0..n0 {
                for j in 0..n1 {
                    if !self.basis[i][j] && self.costs[(i, j)] - u[i] - v[j] < -tol {
                        entering = Some((i, j));
                        break 'scan;
                    }
                }
            }
            let Some(enter) = entering else {
                let objective: f64 = self
                    .flows
                    .zip_fold(&self.costs, 0.0, |acc, l, c| acc + l * c);
                let dual: f64 = self
                    .supply
                    .iter()
                    .zip(&u)
                    .map(|(a, ui)| a * ui)
                    .sum::<f64>()
                    + self.demand.iter().zip(&v).map(|(b, vj)| b * vj).sum::<f64>();
                self.duality_gap = (objective - dual).abs();
                return Ok(());
            };
            let cells = self.cycle(enter);
            // Odd positions lose flow; the step is the smallest such flow and
            // the leaving cell the lexicographically first one attaining it.
            let mut theta = f64::INFINITY;
            for (pos, &cell) in cells.iter().enumerate() {
                if pos % 2 == 1 {
                    theta = theta.min(self.flows[cell]);
                }
            }
            let mut leaving = None;
            for (pos, &cell) in cells.iter().enumerate() {
                if pos % 2 == 1
                    && self.flows[cell] <= theta
                    && leaving.map_or(true, |l| cell < l)
                {
                    leaving = Some(cell);
                }
            }
            let leave = leaving.expect("cycle has at least one decreasing cell");
            for (pos, &cell) in cells.iter().enumerate() {
                if pos % 2 == 0 {
                    self.flows[cell] += theta;
                } else {
                    self.flows[cell] -= theta;
                }
            }
            self.flows[leave] = 0.0;
            self.basis[leave.0][leave.1] = false;
            self.basis[enter.0][enter.1] = true;
        }
        Err(Error::SolverFailure {
            status: "transportation simplex exceeded its pivot budget".into(),
        })
    }
}
