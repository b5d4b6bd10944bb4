//! Time grids, linearized dynamics along a reference, and solved bridges.

use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// A uniform time grid t_0 = 0 < t_1 < … < t_{N−1} = T.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// `node_count` nodes spanning [0, horizon], horizon > 0, at least two nodes.
    pub fn uniform(horizon: f64, node_count: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(Error::Invalid {
                what: "time horizon",
                why: format!("{horizon} is not positive"),
            });
        }
        if node_count < 2 {
            return Err(Error::Invalid {
                what: "time grid",
                why: format!("{node_count} nodes, need at least 2"),
            });
        }
        let dt = horizon / (node_count - 1) as f64;
        let mut nodes: Vec<f64> = (0..node_count).map(|k| k as f64 * dt).collect();
        nodes[node_count - 1] = horizon;
        Ok(Self { horizon, nodes })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of nodes N.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of intervals N − 1.
    pub fn interval_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.interval_count() as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.nodes[k]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
}

/// Time-varying linear dynamics obtained by differentiating a drift field
/// along a reference trajectory:
///   δẋ = A(t) δx + B u + D ẇ,  A_k = ∇f(x̄_k).
///
/// Holds N Jacobians (one per node), the constant input and noise matrices,
/// and the reference itself (N states, N−1 controls).
#[derive(Debug, Clone)]
pub struct LtvTrajectory {
    pub grid: TimeGrid,
    pub a: Vec<DMatrix<f64>>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub reference_states: Vec<DVector<f64>>,
    pub reference_controls: Vec<DVector<f64>>,
}

impl LtvTrajectory {
    pub fn new(
        grid: TimeGrid,
        a: Vec<DMatrix<f64>>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        reference_states: Vec<DVector<f64>>,
        reference_controls: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let nodes = grid.len();
        if a.len() != nodes {
            return Err(Error::DimensionMismatch(format!(
                "{} Jacobians for {} nodes",
                a.len(),
                nodes
            )));
        }
        if reference_states.len() != nodes {
            return Err(Error::DimensionMismatch(format!(
                "{} reference states for {} nodes",
                reference_states.len(),
                nodes
            )));
        }
        if reference_controls.len() != nodes - 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} reference controls for {} intervals",
                reference_controls.len(),
                nodes - 1
            )));
        }
        let n = b.nrows();
        if a.iter().any(|m| m.nrows() != n || m.ncols() != n) {
            return Err(Error::DimensionMismatch(
                "Jacobian size does not match the input matrix".into(),
            ));
        }
        if d.nrows() != n {
            return Err(Error::DimensionMismatch(
                "noise matrix rows do not match the state dimension".into(),
            ));
        }
        Ok(Self {
            grid,
            a,
            b,
            d,
            reference_states,
            reference_controls,
        })
    }

    /// Linearizes `model` along the given reference.
    pub fn from_reference(
        model: &dyn Dynamics,
        grid: TimeGrid,
        reference_states: Vec<DVector<f64>>,
        reference_controls: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let mut a = Vec::with_capacity(grid.len());
        for (k, x) in reference_states.iter().enumerate() {
            a.push(model.jacobian(grid.node(k), x)?);
        }
        Self::new(
            grid,
            a,
            model.input_matrix().clone(),
            model.noise_matrix().clone(),
            reference_states,
            reference_controls,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.d.ncols()
    }
}

/// A solved covariance-steering bridge for one pair of boundary components:
/// the linearization it was built on, drift values at the reference nodes,
/// the planned covariances Σ_k at every node, feedback gains K_k on every
/// interval, and the planned cost.
#[derive(Debug, Clone)]
pub struct BridgeSolution {
    pub pair: (usize, usize),
    pub ltv: LtvTrajectory,
    pub reference_drifts: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub cost: f64,
}

impl BridgeSolution {
    /// Frobenius-norm residuals against the intended boundary covariances.
    pub fn boundary_residuals(&self, sigma_start: &DMatrix<f64>, sigma_end: &DMatrix<f64>) -> (f64, f64) {
        let first = self.covariances.first().expect("bridge has nodes");
        let last = self.covariances.last().expect("bridge has nodes");
        ((first - sigma_start).norm(), (last - sigma_end).norm())
    }

    /// Planned control on interval k for state x: ū_k + K_k (x − μ_k).
    pub fn control(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.ltv.reference_controls[k] + &self.gains[k] * (x - &self.ltv.reference_states[k])
    }

    /// First-order drift expansion around node k: f(μ_k) + A_k (x − μ_k).
    pub fn linearized_drift(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.reference_drifts[k] + &self.ltv.a[k] * (x - &self.ltv.reference_states[k])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_spacing() {
        let g = TimeGrid::uniform(2.0, 5).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g.interval_count(), 4);
        assert!((g.dt() - 0.5).abs() < 1e-15);
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(4), 2.0);
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        assert!(TimeGrid::uniform(0.0, 5).is_err());
        assert!(TimeGrid::uniform(-1.0, 5).is_err());
        assert!(TimeGrid::uniform(1.0, 1).is_err());
    }

    #[test]
    fn trajectory_length_checks() {
        let grid = TimeGrid::uniform(1.0, 3).unwrap();
        let a = vec![DMatrix::identity(2, 2); 3];
        let b = DMatrix::identity(2, 2);
        let d = DMatrix::identity(2, 2);
        let xs = vec![DVector::zeros(2); 3];
        let us = vec![DVector::zeros(2); 2];
        assert!(LtvTrajectory::new(grid.clone(), a.clone(), b.clone(), d.clone(), xs.clone(), us.clone()).is_ok());
        assert!(LtvTrajectory::new(grid.clone(), a[..2].to_vec(), b.clone(), d.clone(), xs.clone(), us.clone()).is_err());
        assert!(LtvTrajectory::new(grid, a, b, d, xs, vec![DVector::zeros(2); 3]).is_err());
    }
}
