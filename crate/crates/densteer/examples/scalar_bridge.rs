//! Steer the variance of dx = (a x + u) dt + d dW between two values
//! and compare the discrete solution against the stationary intuition.

use densteer::cov_steer::{solve_ocs, OcsOptions, OcsSdpProblem};
use densteer::ltv::{LtvTrajectory, TimeGrid};
use nalgebra::{DMatrix, DVector};

fn main() {
    let nodes = 101;
    let grid = TimeGrid::uniform(1.0, nodes).unwrap();
    let a = -0.5;
    let d = 0.4;

    let ltv = LtvTrajectory::new(
        grid,
        vec![DMatrix::from_element(1, 1, a); nodes],
        DMatrix::identity(1, 1),
        DMatrix::from_element(1, 1, d),
        vec![DVector::zeros(1); nodes],
        vec![DVector::zeros(1); nodes - 1],
    )
    .unwrap();

    let problem = OcsSdpProblem {
        ltv: &ltv,
        sigma_start: DMatrix::from_element(1, 1, 0.09),
        sigma_end: DMatrix::from_element(1, 1, 0.02),
        control_weight: None,
        noise_regularization: DMatrix::zeros(1, 1),
    };
    let solution = solve_ocs(&problem, &OcsOptions::default()).unwrap();

    println!("solver status {}", solution.solver_status);
    println!("feedback energy {:.6}", solution.cost);
    for k in (0..nodes).step_by(20) {
        let var = solution.covariances[k][(0, 0)];
        if k + 1 < nodes {
            println!(
                "t = {:.2}  var = {:.5}  gain = {:+.4}",
                ltv.grid.node(k),
                var,
                solution.gains[k][(0, 0)]
            );
        } else {
            println!("t = {:.2}  var = {:.5}", ltv.grid.node(k), var);
        }
    }
    let uncontrolled = d * d / (-2.0 * a);
    println!("uncontrolled stationary variance would be {uncontrolled:.5}");
}
