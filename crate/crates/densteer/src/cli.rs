//! Scenario-driven command line: validate configs, build a policy,
//! simulate it, and write run artifacts.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, ValueEnum};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{self, ConfigFile, Scenario};
use crate::cov_steer::{dump_conic, OcsSdpProblem};
use crate::error::{Error, Result};
use crate::ltv::BridgeSolution;
use crate::metrics;
use crate::output::{self, RunMetrics};
use crate::pipeline;
use crate::policy::ControlPolicy;
use crate::sim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyKind {
    /// Blend one affine law per transported component pair.
    Ml,
    /// Single affine law around the moment-matched boundary moments.
    Sl,
}

impl PolicyKind {
    fn name(self) -> &'static str {
        match self {
            PolicyKind::Ml => "ml",
            PolicyKind::Sl => "sl",
        }
    }
}

/// Steer a state density between two Gaussian mixtures.
#[derive(Debug, Parser)]
#[command(name = "densteer", version)]
pub struct Args {
    /// Scenario config file.
    #[arg(long)]
    pub config: PathBuf,

    /// Directory for run artifacts.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,

    /// Control law to build and simulate.
    #[arg(long, value_enum, default_value_t = PolicyKind::Ml)]
    pub policy: PolicyKind,

    /// Override [simulation].particles.
    #[arg(long)]
    pub particles: Option<usize>,

    /// Override [simulation].seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Check the config and exit without solving.
    #[arg(long)]
    pub validate_only: bool,

    /// Also write the scaled conic problem data for each bridge.
    #[arg(long)]
    pub dump_conic: bool,
}

#[derive(Debug, Serialize)]
struct ErrorReport {
    error: &'static str,
    message: String,
}

#[derive(Debug, Serialize)]
struct Overrides {
    particles: Option<usize>,
    seed: Option<u64>,
}

/// Everything needed to reproduce a run: tool version, command-line
/// choices, and the fully resolved config with defaults applied.
#[derive(Debug, Serialize)]
struct RunManifest {
    version: &'static str,
    config_path: String,
    policy: &'static str,
    overrides: Overrides,
    simulation_seed: u64,
    metrics_seed: u64,
    config: ConfigFile,
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Config(_) | Error::UnknownModel(_) => "config",
        Error::Io(_) => "io",
        Error::Pair { .. } => "pair",
        Error::NoData(_) => "no_data",
        Error::SdpInfeasible
        | Error::SolverFailure { .. }
        | Error::UncontrollablePair
        | Error::ReferenceNotConverged { .. } => "solver",
        Error::InvalidMarginals(_) => "transport",
        Error::DriftSingularity { .. } => "dynamics",
        _ => "invalid",
    }
}

/// Entry point for the thin binary; returns the process exit code.
pub fn main() -> i32 {
    let args = Args::parse();
    let env = env_logger::Env::default().default_filter_or("info");
    env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init()
        .ok();
    match execute(&args) {
        Ok(()) => 0,
        Err(err) => {
            let report = ErrorReport {
                error: error_kind(&err),
                message: err.to_string(),
            };
            match serde_json::to_string(&report) {
                Ok(line) => println!("{line}"),
                Err(_) => println!("{{\"error\":\"internal\",\"message\":\"{err}\"}}"),
            }
            1
        }
    }
}

pub fn execute(args: &Args) -> Result<()> {
    let text = fs::read_to_string(&args.config)?;

    if args.validate_only {
        let diagnostics = config::validate(&text);
        if diagnostics.is_empty() {
            println!("config ok: {}", args.config.display());
            return Ok(());
        }
        return Err(Error::Config(format!(
            "{} problem(s): {}",
            diagnostics.len(),
            diagnostics.join("; ")
        )));
    }

    let mut file = config::parse_config(&text)?;
    if let Some(particles) = args.particles {
        file.simulation.particles = particles;
    }
    if let Some(seed) = args.seed {
        file.simulation.seed = seed;
    }
    let scenario = config::build_scenario(file)?;
    fs::create_dir_all(&args.out)?;

    match args.policy {
        PolicyKind::Ml => {
            let ml = pipeline::build_ml_policy(
                scenario.model.as_ref(),
                &scenario.initial,
                &scenario.terminal,
                &scenario.grid,
                &scenario.solver,
            )?;
            run_and_write(
                args,
                &scenario,
                &ml.policy,
                ml.policy.bridges(),
                ml.policy.lambdas(),
                ml.transport_objective,
                matrix_rows(&ml.pair_costs),
            )
        }
        PolicyKind::Sl => {
            let sl = pipeline::build_sl_policy(
                scenario.model.as_ref(),
                &scenario.initial,
                &scenario.terminal,
                &scenario.grid,
                &scenario.solver,
            )?;
            let cost = sl.cost();
            run_and_write(
                args,
                &scenario,
                &sl.policy,
                std::slice::from_ref(sl.policy.bridge()),
                &[1.0],
                cost,
                vec![vec![cost]],
            )
        }
    }
}

fn run_and_write(
    args: &Args,
    scenario: &Scenario,
    policy: &dyn ControlPolicy,
    bridges: &[BridgeSolution],
    lambdas: &[f64],
    transport_objective: f64,
    per_pair_costs: Vec<Vec<f64>>,
) -> Result<()> {
    if args.dump_conic {
        write_conic_dumps(args, scenario, bridges)?;
    }

    let result = sim::simulate(
        scenario.model.as_ref(),
        policy,
        &scenario.initial,
        &scenario.grid,
        &scenario.simulation,
    )?;

    let j_ctrl = sim::estimate_cost(&result)?;
    let survivors = result.surviving_terminal_states();
    let (mean, cov) = metrics::empirical_moments(&survivors)?;
    let target = scenario
        .terminal
        .sample(survivors.len(), scenario.metrics.seed)?;
    let sliced_w2 = metrics::sliced_w2(
        &survivors,
        &target,
        scenario.metrics.projections,
        scenario.metrics.seed,
    )?;
    let (mixture_trace, within_trace) = metrics::theorem1_bounds(&scenario.terminal);

    let run_metrics = RunMetrics {
        j_ctrl,
        sliced_w2,
        terminal_mean: mean.iter().copied().collect(),
        terminal_cov: matrix_rows(&cov),
        theorem1_bounds: [mixture_trace, within_trace],
        transport_objective,
        per_pair_costs,
        diverged_particles: result.diverged_count(),
    };

    output::write_trajectories_csv(&args.out.join("trajectories.csv"), &result)?;
    output::write_bridges_csv(&args.out.join("bridges.csv"), bridges, lambdas)?;
    output::write_metrics(&args.out.join("metrics.json"), &run_metrics)?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        config_path: args.config.display().to_string(),
        policy: args.policy.name(),
        overrides: Overrides {
            particles: args.particles,
            seed: args.seed,
        },
        simulation_seed: scenario.simulation.seed,
        metrics_seed: scenario.metrics.seed,
        config: scenario.config.clone(),
    };
    output::write_json(&args.out.join("run_manifest.json"), &manifest)?;

    log::info!(
        "wrote {}: j_ctrl {:.6e}, sliced_w2 {:.6e}, {} of {} particles diverged",
        args.out.display(),
        j_ctrl,
        sliced_w2,
        result.diverged_count(),
        result.particle_count()
    );
    Ok(())
}

fn write_conic_dumps(args: &Args, scenario: &Scenario, bridges: &[BridgeSolution]) -> Result<()> {
    let n = scenario.model.state_dim();
    let regularization = scenario.solver.epsilon_sq.matrix(n);
    for bridge in bridges {
        let (i, j) = bridge.pair;
        let (sigma_start, sigma_end) = match args.policy {
            PolicyKind::Ml => (
                scenario.initial.components()[i].covariance().clone(),
                scenario.terminal.components()[j].covariance().clone(),
            ),
            PolicyKind::Sl => (scenario.initial.covariance(), scenario.terminal.covariance()),
        };
        let problem = OcsSdpProblem {
            ltv: &bridge.ltv,
            sigma_start,
            sigma_end,
            control_weight: None,
            noise_regularization: regularization.clone(),
        };
        fs::write(
            args.out.join(format!("conic_{i}_{j}.json")),
            dump_conic(&problem)?,
        )?;
    }
    Ok(())
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}
