//! Coarse Earth-to-Mars run straight from an inline scenario config:
//! solve the component-pair bridges, couple them, simulate the blended
//! policy, and report the terminal fit.

use densteer::config::{build_scenario, parse_config};
use densteer::metrics::{empirical_moments, sliced_w2};
use densteer::pipeline::build_ml_policy;
use densteer::sim::{estimate_cost, simulate};

const SCENARIO: &str = r#"
[dynamics]
name = "two_body_2d"
noise_gv_si = 1e-4

[horizon]
t_days = 259.0
nodes = 51

[[initial.components]]
weight = 0.5
position_au = [1.0, 0.0]
velocity_km_s = [0.0, 29.7845806980]
cov_diag = [4.5e-9, 4.5e-9, 3.5e-9, 3.5e-9]

[[initial.components]]
weight = 0.5
position_au = [0.9995500337, 0.0299955002]
velocity_km_s = [-0.8934033964, 29.7711786419]
cov_diag = [4.5e-9, 4.5e-9, 3.5e-9, 3.5e-9]

[[terminal.components]]
weight = 1.0
position_au = [-1.5227809626, 0.0609437453]
velocity_km_s = [-0.9648130750, -24.1074613292]
cov_diag = [4.5e-6, 4.5e-6, 3.5e-8, 3.5e-8]

[simulation]
particles = 100
seed = 5
"#;

fn main() {
    env_logger::init();
    let scenario = build_scenario(parse_config(SCENARIO).unwrap()).unwrap();

    let ml = build_ml_policy(
        scenario.model.as_ref(),
        &scenario.initial,
        &scenario.terminal,
        &scenario.grid,
        &scenario.solver,
    )
    .unwrap();
    println!("pair costs {}", ml.pair_costs);
    println!("transport objective {:.6e}", ml.transport_objective);
    for (bridge, lambda) in ml.policy.bridges().iter().zip(ml.policy.lambdas()) {
        println!("bridge {:?} carries {:.3}", bridge.pair, lambda);
    }

    let result = simulate(
        scenario.model.as_ref(),
        &ml.policy,
        &scenario.initial,
        &scenario.grid,
        &scenario.simulation,
    )
    .unwrap();
    let survivors = result.surviving_terminal_states();
    let (mean, _) = empirical_moments(&survivors).unwrap();
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
        "simulated cost {:.6e}, terminal mean {:?}",
        estimate_cost(&result).unwrap(),
        mean.as_slice()
    );
    println!(
        "sliced W2 to target {w2:.6e}, diverged {} of {}",
        result.diverged_count(),
        result.particle_count()
    );
}
