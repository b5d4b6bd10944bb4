//! Scenario configuration: a TOML file describing the model, horizon,
//! boundary mixtures, and solver/simulation knobs. All unit conversion
//! happens here, once, at load time; everything downstream works in
//! canonical units (AU and days for the orbital models).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cov_steer::OcsOptions;
use crate::dynamics::{build_model, noise_intensity_si_to_canonical, Dynamics, KM_PER_S_TO_AU_PER_DAY};
use crate::error::{Error, Result};
use crate::gmm::{GaussianComponent, GmmDistribution};
use crate::ltv::TimeGrid;
use crate::mean_ocp::MeanOcpOptions;
use crate::pipeline::{EpsilonSq, SolverOptions};
use crate::sim::SimOptions;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub dynamics: DynamicsSection,
    pub horizon: HorizonSection,
    pub initial: BoundarySection,
    pub terminal: BoundarySection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

/// A scalar applied to the whole diagonal, or an explicit diagonal.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum EpsilonValue {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

impl Default for EpsilonValue {
    fn default() -> Self {
        EpsilonValue::Scalar(0.0)
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    /// Registered model name.
    pub name: String,
    /// Velocity noise intensity in SI units (m/s^1.5), converted to
    /// AU/day^1.5 at load. Mutually exclusive with `noise_intensity`.
    #[serde(default)]
    pub noise_gv_si: Option<f64>,
    /// Noise intensity already in canonical units.
    #[serde(default)]
    pub noise_intensity: Option<f64>,
    /// ε² added to the diagonal of D Dᵀ in the covariance recursion:
    /// a single value or one value per state.
    #[serde(default)]
    pub epsilon_sq: EpsilonValue,
    /// Extra model parameters handed to the registry factory.
    #[serde(default)]
    pub parameters: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    pub t_days: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySection {
    pub components: Vec<ComponentSection>,
}

/// One mixture component. The mean is given either directly in
/// canonical units (`mean`) or as `position_au` plus `velocity_km_s`,
/// which is converted at load. The covariance is `cov_diag` or
/// `cov_full`, already in canonical units.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSection {
    pub weight: f64,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    #[serde(default)]
    pub position_au: Option<Vec<f64>>,
    #[serde(default)]
    pub velocity_km_s: Option<Vec<f64>>,
    #[serde(default)]
    pub cov_diag: Option<Vec<f64>>,
    #[serde(default)]
    pub cov_full: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub sdp_tol: f64,
    pub sdp_max_iterations: u32,
    pub ocp_defect_tol: f64,
    pub ocp_boundary_tol: f64,
    pub ocp_step_tol: f64,
    pub ocp_max_iterations: usize,
    pub relinearize_iters: usize,
    /// Score pairs by feedback energy alone (ablation).
    pub sdp_cost_only: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        let ocs = OcsOptions::default();
        let ocp = MeanOcpOptions::default();
        SolverSection {
            sdp_tol: ocs.tol,
            sdp_max_iterations: ocs.max_iterations,
            ocp_defect_tol: ocp.defect_tol,
            ocp_boundary_tol: ocp.boundary_tol,
            ocp_step_tol: ocp.step_tol,
            ocp_max_iterations: ocp.max_iterations,
            relinearize_iters: 0,
            sdp_cost_only: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub particles: usize,
    pub seed: u64,
    pub substeps: usize,
    pub divergence_threshold: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let sim = SimOptions::default();
        SimulationSection {
            particles: sim.particles,
            seed: 42,
            substeps: sim.substeps,
            divergence_threshold: sim.divergence_threshold,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Projection directions for the sliced distance.
    pub projections: usize,
    /// Seed for the projection directions and the target resampling.
    pub seed: u64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            projections: 256,
            seed: 1234,
        }
    }
}

/// A fully resolved scenario: the parsed config with defaults applied
/// plus every object the pipeline needs.
pub struct Scenario {
    pub config: ConfigFile,
    pub model: Arc<dyn Dynamics>,
    pub grid: TimeGrid,
    pub initial: GmmDistribution,
    pub terminal: GmmDistribution,
    pub solver: SolverOptions,
    pub simulation: SimOptions,
    pub metrics: MetricsSection,
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    build_scenario(parse_config(&text)?)
}

fn check_epsilon(value: &EpsilonValue) -> Result<()> {
    let bad = match value {
        EpsilonValue::Scalar(v) => (!v.is_finite() || *v < 0.0).then(|| v.to_string()),
        EpsilonValue::Diagonal(d) => d
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0)
            .map(|v| v.to_string()),
    };
    match bad {
        Some(v) => Err(Error::Config(format!(
            "dynamics.epsilon_sq: {v} is negative or not finite"
        ))),
        None => Ok(()),
    }
}

fn resolve_epsilon(value: &EpsilonValue, state_dim: usize) -> Result<EpsilonSq> {
    match value {
        EpsilonValue::Scalar(v) => Ok(EpsilonSq::Scalar(*v)),
        EpsilonValue::Diagonal(d) if d.len() == state_dim => {
            Ok(EpsilonSq::Diagonal(DVector::from_row_slice(d)))
        }
        EpsilonValue::Diagonal(d) => Err(Error::Config(format!(
            "dynamics.epsilon_sq: {} entries but the state has {state_dim}",
            d.len()
        ))),
    }
}

fn build_dynamics(section: &DynamicsSection) -> Result<Arc<dyn Dynamics>> {
    let mut params = section.parameters.clone();
    match (section.noise_gv_si, section.noise_intensity) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "dynamics: noise_gv_si and noise_intensity are mutually exclusive".into(),
            ))
        }
        (Some(si), None) => {
            params.insert(
                "noise_intensity".into(),
                noise_intensity_si_to_canonical(si),
            );
        }
        (None, Some(canonical)) => {
            params.insert("noise_intensity".into(), canonical);
        }
        (None, None) => {}
    }
    check_epsilon(&section.epsilon_sq)?;
    build_model(&section.name, &params)
}

fn build_component(
    boundary: &str,
    index: usize,
    section: &ComponentSection,
    state_dim: usize,
) -> Result<GaussianComponent> {
    let field = |name: &str| format!("{boundary}.components[{index}].{name}");

    let mean = match (&section.mean, &section.position_au, &section.velocity_km_s) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
            return Err(Error::Config(format!(
                "{}: give either mean or position_au/velocity_km_s, not both",
                field("mean")
            )))
        }
        (Some(mean), None, None) => {
            if mean.len() != state_dim {
                return Err(Error::Config(format!(
                    "{}: has {} entries, model state has {}",
                    field("mean"),
                    mean.len(),
                    state_dim
                )));
            }
            DVector::from_row_slice(mean)
        }
        (None, Some(pos), Some(vel)) => {
            if pos.len() + vel.len() != state_dim || pos.len() != vel.len() {
                return Err(Error::Config(format!(
                    "{}: position has {} entries and velocity {}, model state has {}",
                    field("position_au"),
                    pos.len(),
                    vel.len(),
                    state_dim
                )));
            }
            let mut m = DVector::zeros(state_dim);
            for (i, p) in pos.iter().enumerate() {
                m[i] = *p;
            }
            for (i, v) in vel.iter().enumerate() {
                m[pos.len() + i] = v * KM_PER_S_TO_AU_PER_DAY;
            }
            m
        }
        _ => {
            return Err(Error::Config(format!(
                "{}: needs mean, or position_au together with velocity_km_s",
                field("mean")
            )))
        }
    };

    let covariance = match (&section.cov_diag, &section.cov_full) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(format!(
                "{}: cov_diag and cov_full are mutually exclusive",
                field("cov_diag")
            )))
        }
        (Some(diag), None) => {
            if diag.len() != state_dim {
                return Err(Error::Config(format!(
                    "{}: has {} entries, model state has {}",
                    field("cov_diag"),
                    diag.len(),
                    state_dim
                )));
            }
            DMatrix::from_diagonal(&DVector::from_row_slice(diag))
        }
        (None, Some(rows)) => {
            if rows.len() != state_dim || rows.iter().any(|r| r.len() != state_dim) {
                return Err(Error::Config(format!(
                    "{}: must be a {state_dim}x{state_dim} matrix",
                    field("cov_full")
                )));
            }
            DMatrix::from_fn(state_dim, state_dim, |i, j| rows[i][j])
        }
        (None, None) => {
            return Err(Error::Config(format!(
                "{}: needs cov_diag or cov_full",
                field("cov_diag")
            )))
        }
    };

    GaussianComponent::new(section.weight, mean, covariance)
        .map_err(|e| Error::Config(format!("{}: {e}", field("weight"))))
}

fn build_boundary(
    boundary: &str,
    section: &BoundarySection,
    state_dim: usize,
) -> Result<GmmDistribution> {
    if section.components.is_empty() {
        return Err(Error::Config(format!(
            "{boundary}.components: at least one component is required"
        )));
    }
    let components = section
        .components
        .iter()
        .enumerate()
        .map(|(i, c)| build_component(boundary, i, c, state_dim))
        .collect::<Result<Vec<_>>>()?;
    GmmDistribution::new(components)
        .map_err(|e| Error::Config(format!("{boundary}.components: {e}")))
}

pub fn build_scenario(config: ConfigFile) -> Result<Scenario> {
    let model = build_dynamics(&config.dynamics)?;
    let grid = TimeGrid::uniform(config.horizon.t_days, config.horizon.nodes)
        .map_err(|e| Error::Config(format!("horizon: {e}")))?;
    let initial = build_boundary("initial", &config.initial, model.state_dim())?;
    let terminal = build_boundary("terminal", &config.terminal, model.state_dim())?;

    let s = &config.solver;
    if s.sdp_tol <= 0.0 || s.ocp_defect_tol <= 0.0 || s.ocp_boundary_tol <= 0.0 {
        return Err(Error::Config("solver: tolerances must be positive".into()));
    }
    let solver = SolverOptions {
        mean_ocp: MeanOcpOptions {
            defect_tol: s.ocp_defect_tol,
            boundary_tol: s.ocp_boundary_tol,
            max_iterations: s.ocp_max_iterations,
            step_tol: s.ocp_step_tol,
        },
        ocs: OcsOptions {
            tol: s.sdp_tol,
            max_iterations: s.sdp_max_iterations,
            verbose: false,
        },
        relinearize_iters: s.relinearize_iters,
        sdp_cost_only: s.sdp_cost_only,
        epsilon_sq: resolve_epsilon(&config.dynamics.epsilon_sq, model.state_dim())?,
    };

    let sim = &config.simulation;
    if sim.particles == 0 {
        return Err(Error::Config("simulation.particles: must be at least 1".into()));
    }
    if sim.substeps == 0 {
        return Err(Error::Config("simulation.substeps: must be at least 1".into()));
    }
    let simulation = SimOptions {
        particles: sim.particles,
        seed: sim.seed,
        substeps: sim.substeps,
        divergence_threshold: sim.divergence_threshold,
    };

    if config.metrics.projections == 0 {
        return Err(Error::Config("metrics.projections: must be at least 1".into()));
    }

    Ok(Scenario {
        metrics: config.metrics.clone(),
        model,
        grid,
        initial,
        terminal,
        solver,
        simulation,
        config,
    })
}

/// Schema and invariant checks without solving anything. Returns one
/// message per problem found; an empty list means the config is clean.
pub fn validate(text: &str) -> Vec<String> {
    let config = match parse_config(text) {
        Ok(c) => c,
        Err(e) => return vec![e.to_string()],
    };
    let mut diagnostics = Vec::new();

    let state_dim = match build_dynamics(&config.dynamics) {
        Ok(model) => Some(model.state_dim()),
        Err(e) => {
            diagnostics.push(e.to_string());
            None
        }
    };
    if let Err(e) = TimeGrid::uniform(config.horizon.t_days, config.horizon.nodes) {
        diagnostics.push(format!("horizon: {e}"));
    }
    if let Some(n) = state_dim {
        if let Err(e) = resolve_epsilon(&config.dynamics.epsilon_sq, n) {
            diagnostics.push(e.to_string());
        }
    }
    if let Some(n) = state_dim {
        for (boundary, section) in [("initial", &config.initial), ("terminal", &config.terminal)] {
            let mut weight_total = 0.0;
            for (i, comp) in section.components.iter().enumerate() {
                weight_total += comp.weight;
                if let Err(e) = build_component(boundary, i, comp, n) {
                    diagnostics.push(e.to_string());
                }
            }
            if section.components.is_empty() {
                diagnostics.push(format!("{boundary}.components: none given"));
            } else if (weight_total - 1.0).abs() > 1e-10 {
                diagnostics.push(format!(
                    "{boundary}.components: weights sum to {weight_total}, expected 1"
                ));
            }
        }
    }
    if config.solver.sdp_tol <= 0.0 {
        diagnostics.push("solver.sdp_tol: must be positive".into());
    }
    if config.solver.ocp_defect_tol <= 0.0 || config.solver.ocp_boundary_tol <= 0.0 {
        diagnostics.push("solver: collocation tolerances must be positive".into());
    }
    if config.simulation.particles == 0 {
        diagnostics.push("simulation.particles: must be at least 1".into());
    }
    if config.simulation.substeps == 0 {
        diagnostics.push("simulation.substeps: must be at least 1".into());
    }
    if config.metrics.projections == 0 {
        diagnostics.push("metrics.projections: must be at least 1".into());
    }
    diagnostics
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    const SMOKE: &str = r#"
[dynamics]
name = "double_integrator"
noise_intensity = 0.1

[horizon]
t_days = 1.0
nodes = 21

[[initial.components]]
weight = 1.0
mean = [0.0, 0.0]
cov_diag = [0.1, 0.05]

[[terminal.components]]
weight = 1.0
mean = [1.0, 0.0]
cov_diag = [0.02, 0.01]
"#;

    const ORBITAL: &str = r#"
[dynamics]
name = "two_body_2d"
noise_gv_si = 1e-4
epsilon_sq = 1e-14

[horizon]
t_days = 259.0
nodes = 101

[[initial.components]]
weight = 0.5
position_au = [1.0, 0.0]
velocity_km_s = [0.0, 29.78]
cov_diag = [4.5e-9, 4.5e-9, 3.5e-9, 3.5e-9]

[[initial.components]]
weight = 0.5
position_au = [0.999, 0.02]
velocity_km_s = [-0.1, 29.78]
cov_diag = [4.5e-9, 4.5e-9, 3.5e-9, 3.5e-9]

[[terminal.components]]
weight = 1.0
position_au = [-1.524, 0.0]
velocity_km_s = [0.0, -24.07]
cov_diag = [4.5e-6, 4.5e-6, 3.5e-8, 3.5e-8]

[simulation]
particles = 200
seed = 7

[metrics]
projections = 128
seed = 3
"#;

    #[test]
    fn smoke_config_resolves_with_defaults() {
        let scenario = build_scenario(parse_config(SMOKE).unwrap()).unwrap();
        assert_eq!(scenario.model.name(), "double_integrator");
        assert_eq!(scenario.grid.len(), 21);
        assert_eq!(scenario.simulation.particles, 200);
        assert_eq!(scenario.simulation.seed, 42);
        assert_eq!(scenario.metrics.projections, 256);
        assert_relative_eq!(scenario.solver.ocs.tol, 1e-8);
        assert_eq!(scenario.solver.relinearize_iters, 0);
        assert!(validate(SMOKE).is_empty());
    }

    #[test]
    fn epsilon_accepts_a_per_state_diagonal() {
        let text = ORBITAL.replace(
            "epsilon_sq = 1e-14",
            "epsilon_sq = [5e-9, 5e-9, 1e-8, 1e-8]",
        );
        let scenario = build_scenario(parse_config(&text).unwrap()).unwrap();
        let m = scenario.solver.epsilon_sq.matrix(4);
        assert_relative_eq!(m[(0, 0)], 5e-9);
        assert_relative_eq!(m[(3, 3)], 1e-8);
        assert_relative_eq!(m[(0, 1)], 0.0);

        let short = ORBITAL.replace("epsilon_sq = 1e-14", "epsilon_sq = [1e-9, 1e-9]");
        match build_scenario(parse_config(&short).unwrap()) {
            Err(err) => assert!(err.to_string().contains("epsilon_sq"), "{err}"),
            Ok(_) => panic!("two-entry diagonal must be rejected for a 4-state model"),
        }
    }

    #[test]
    fn orbital_config_converts_units_once() {
        let scenario = build_scenario(parse_config(ORBITAL).unwrap()).unwrap();
        let mean = scenario.initial.components()[0].mean();
        assert_abs_diff_eq!(mean[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(
            mean[3],
            29.78 * KM_PER_S_TO_AU_PER_DAY,
            max_relative = 1e-15
        );
        // 1e-4 m/s^1.5 in AU/day^1.5
        let d = scenario.model.noise_matrix();
        assert_relative_eq!(d[(2, 0)], 1.6976384446076203e-8, max_relative = 1e-12);
        match &scenario.solver.epsilon_sq {
            EpsilonSq::Scalar(v) => assert_relative_eq!(*v, 1e-14),
            other => panic!("expected scalar epsilon, got {other:?}"),
        }
        assert!(validate(ORBITAL).is_empty());
    }

    #[test]
    fn bad_weight_sum_is_reported_by_field() {
        let text = SMOKE.replace("weight = 1.0\nmean = [0.0, 0.0]", "weight = 0.9\nmean = [0.0, 0.0]");
        let diagnostics = validate(&text);
        assert_eq!(diagnostics.len(), 1, "{diagnostics:?}");
        assert!(diagnostics[0].contains("initial.components"));
        assert!(diagnostics[0].contains("0.9"));
    }

    #[test]
    fn negative_variance_is_rejected() {
        let text = SMOKE.replace("cov_diag = [0.1, 0.05]", "cov_diag = [-0.1, 0.05]");
        let diagnostics = validate(&text);
        assert!(!diagnostics.is_empty());
        assert!(diagnostics.iter().any(|d| d.contains("initial.components[0]")));
        assert!(build_scenario(parse_config(&text).unwrap()).is_err());
    }

    #[test]
    fn unknown_fields_are_schema_errors() {
        let text = SMOKE.replace("[horizon]", "[horizon]\nt_hours = 3.0");
        let diagnostics = validate(&text);
        assert_eq!(diagnostics.len(), 1);
        assert!(diagnostics[0].contains("t_hours"), "{}", diagnostics[0]);
    }

    #[test]
    fn mean_and_position_are_mutually_exclusive() {
        let text = SMOKE.replace(
            "mean = [0.0, 0.0]\ncov_diag = [0.1, 0.05]",
            "mean = [0.0, 0.0]\nposition_au = [0.0]\nvelocity_km_s = [0.0]\ncov_diag = [0.1, 0.05]",
        );
        assert!(!validate(&text).is_empty());
    }

    #[test]
    fn missing_covariance_is_reported() {
        let text = SMOKE.replace("cov_diag = [0.02, 0.01]\n", "");
        let diagnostics = validate(&text);
        assert!(diagnostics.iter().any(|d| d.contains("terminal.components[0]")));
    }

    #[test]
    fn noise_specifications_are_mutually_exclusive() {
        let text = SMOKE.replace(
            "noise_intensity = 0.1",
            "noise_intensity = 0.1\nnoise_gv_si = 1e-4",
        );
        assert!(!validate(&text).is_empty());
    }

    #[test]
    fn clean_validation_implies_a_buildable_scenario() {
        for text in [SMOKE, ORBITAL] {
            assert!(validate(text).is_empty());
            assert!(build_scenario(parse_config(text).unwrap()).is_ok());
        }
    }
}
