//! Side-by-side policies on the shipped smoke scenario: blended
//! per-pair laws versus a single moment-matched law.

use std::path::Path;

use densteer::config::load_scenario;
use densteer::metrics::sliced_w2;
use densteer::pipeline::{build_ml_policy, build_sl_policy};
use densteer::policy::ControlPolicy;
use densteer::sim::{estimate_cost, simulate};

fn main() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/double_integrator_smoke.cfg");
    let scenario = load_scenario(&config).unwrap();

    let ml = build_ml_policy(
        scenario.model.as_ref(),
        &scenario.initial,
        &scenario.terminal,
        &scenario.grid,
        &scenario.solver,
    )
    .unwrap();
    let sl = build_sl_policy(
        scenario.model.as_ref(),
        &scenario.initial,
        &scenario.terminal,
        &scenario.grid,
        &scenario.solver,
    )
    .unwrap();

    for (name, policy) in [
        ("ml", &ml.policy as &dyn ControlPolicy),
        ("sl", &sl.policy as &dyn ControlPolicy),
    ] {
        let result = simulate(
            scenario.model.as_ref(),
            policy,
            &scenario.initial,
            &scenario.grid,
            &scenario.simulation,
        )
        .unwrap();
        let survivors = result.surviving_terminal_states();
        let target = scenario
            .terminal
            .sample(survivors.len(), scenario.metrics.seed)
            .unwrap();
        let w2 = sliced_w2(
            &survivors,
            &target,
            scenario.metrics.projections,
            scenario.metrics.seed,
        )
        .unwrap();
        println!(
            "{name}: cost {:.5}, sliced W2 {:.5}",
            estimate_cost(&result).unwrap(),
            w2
        );
    }
}
