//! Rest-to-rest double integrator: the minimum-energy mean program
//! recovers u(t) = 6 - 12 t with cost 12, and the covariance program
//! shrinks the state spread around that path.

use std::collections::BTreeMap;

use densteer::dynamics::build_model;
use densteer::gmm::{GaussianComponent, GmmDistribution};
use densteer::ltv::TimeGrid;
use densteer::pipeline::{solve_pair, SolverOptions};
use nalgebra::{DMatrix, DVector};

fn main() {
    let mut params = BTreeMap::new();
    params.insert("noise_intensity".to_string(), 0.05);
    let model = build_model("double_integrator", &params).unwrap();
    let grid = TimeGrid::uniform(1.0, 101).unwrap();

    let start = GaussianComponent::new(
        1.0,
        DVector::from_row_slice(&[0.0, 0.0]),
        DMatrix::from_diagonal(&DVector::from_row_slice(&[0.02, 0.02])),
    )
    .unwrap();
    let goal = GaussianComponent::new(
        1.0,
        DVector::from_row_slice(&[1.0, 0.0]),
        DMatrix::from_diagonal(&DVector::from_row_slice(&[0.005, 0.005])),
    )
    .unwrap();

    let pair = solve_pair(
        model.as_ref(),
        &grid,
        (0, 0),
        &start,
        &goal,
        None,
        &SolverOptions::default(),
    )
    .unwrap();

    println!(
        "mean energy {:.5} (analytic 12), feedback energy {:.5}",
        pair.mean_energy, pair.feedback_energy
    );
    for k in (0..grid.len() - 1).step_by(20) {
        let t = grid.node(k);
        println!(
            "t = {:.2}  u = {:+.4}  (6 - 12t = {:+.4})  pos var {:.5}",
            t,
            pair.bridge.ltv.reference_controls[k][0],
            6.0 - 12.0 * t,
            pair.bridge.covariances[k][(0, 0)]
        );
    }

    // sanity: the full GMM pipeline on the same endpoints gives one bridge
    let gmm0 = GmmDistribution::new(vec![start]).unwrap();
    let gmm1 = GmmDistribution::new(vec![goal]).unwrap();
    let ml = densteer::pipeline::build_ml_policy(
        model.as_ref(),
        &gmm0,
        &gmm1,
        &grid,
        &SolverOptions::default(),
    )
    .unwrap();
    println!(
        "single-pair pipeline objective {:.5}",
        ml.transport_objective
    );
}
