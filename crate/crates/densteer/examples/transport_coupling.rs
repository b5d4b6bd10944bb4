//! Discrete optimal transport between component weights: couple two
//! mixtures through a cost matrix and read off which pairs carry mass.

use densteer::coupling::solve_transport;
use nalgebra::DMatrix;

fn main() {
    // three sources, two sinks; costs favor the diagonal-ish matches
    let costs = DMatrix::from_row_slice(3, 2, &[1.0, 4.0, 2.5, 2.5, 5.0, 1.5]);
    let alpha0 = [0.5, 0.3, 0.2];
    let alpha1 = [0.6, 0.4];

    let plan = solve_transport(&costs, &alpha0, &alpha1).unwrap();

    println!("objective {:.6}", plan.objective(&costs));
    println!("row sums    {:?}", plan.row_sums());
    println!("column sums {:?}", plan.column_sums());
    for (i, j, mass) in plan.support() {
        println!("pair ({i}, {j}) carries {mass:.4}");
    }
}
