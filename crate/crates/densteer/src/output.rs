//! Run artifacts: plot-ready CSV files and JSON summaries. Every float
//! is written with 17 significant digits so artifacts are reproducible
//! bit for bit across platforms.

use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter, Serializer};

use crate::error::Result;
use crate::ltv::BridgeSolution;
use crate::sim::SimulationResult;

fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Pretty JSON with scientific-notation floats.
struct SciFormatter<'a> {
    inner: PrettyFormatter<'a>,
}

impl Formatter for SciFormatter<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_array(writer)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + io::Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object(writer)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + io::Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> io::Result<()> {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object_value(writer)
    }
}

/// Serializes any value as pretty JSON with fixed-precision floats.
pub fn to_json_string(value: &impl Serialize) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = Serializer::with_formatter(
        &mut buf,
        SciFormatter {
            inner: PrettyFormatter::new(),
        },
    );
    value
        .serialize(&mut ser)
        .map_err(|e| crate::error::Error::Invalid {
            what: "json serialization",
            why: e.to_string(),
        })?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, to_json_string(value)?)?;
    Ok(())
}

/// The summary numbers a run reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub j_ctrl: f64,
    pub sliced_w2: f64,
    pub terminal_mean: Vec<f64>,
    pub terminal_cov: Vec<Vec<f64>>,
    /// Trace decomposition of the terminal mixture spread, C-normalized.
    pub theorem1_bounds: [f64; 2],
    pub transport_objective: f64,
    pub per_pair_costs: Vec<Vec<f64>>,
    pub diverged_particles: usize,
}

pub fn write_metrics(path: &Path, metrics: &RunMetrics) -> Result<()> {
    write_json(path, metrics)
}

/// One row per particle and node: the state, the control held on the
/// interval that starts there (zero on the final node), and the control
/// cost accumulated so far.
pub fn write_trajectories_csv(path: &Path, result: &SimulationResult) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let state_dim = result.paths[0].states[0].len();
    let control_dim = result.paths[0].controls.first().map_or(0, |u| u.len());

    let mut header = String::from("particle,node,t");
    for i in 0..state_dim {
        header.push_str(&format!(",x{i}"));
    }
    for i in 0..control_dim {
        header.push_str(&format!(",u{i}"));
    }
    header.push_str(",cumulative_cost\n");
    file.write_all(header.as_bytes())?;

    let intervals = result.grid.interval_count();
    for (p, path) in result.paths.iter().enumerate() {
        let mut cumulative = 0.0;
        for (k, state) in path.states.iter().enumerate() {
            let mut row = format!("{p},{k},{}", fmt_float(result.grid.node(k)));
            for v in state.iter() {
                row.push(',');
                row.push_str(&fmt_float(*v));
            }
            if k < intervals {
                for v in path.controls[k].iter() {
                    row.push(',');
                    row.push_str(&fmt_float(*v));
                }
            } else {
                for _ in 0..control_dim {
                    row.push(',');
                    row.push_str(&fmt_float(0.0));
                }
            }
            row.push(',');
            row.push_str(&fmt_float(cumulative));
            row.push('\n');
            file.write_all(row.as_bytes())?;
            if k < intervals {
                let dt = result.grid.node(k + 1) - result.grid.node(k);
                cumulative += path.controls[k].norm_squared() * dt;
            }
        }
    }
    Ok(())
}

/// One row per bridge and node: reference mean, covariance upper
/// triangle (row major), gain matrix (row major, zero on the final
/// node), and the bridge's mixture mass.
pub fn write_bridges_csv(
    path: &Path,
    bridges: &[BridgeSolution],
    lambdas: &[f64],
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let state_dim = bridges[0].ltv.state_dim();
    let control_dim = bridges[0].ltv.control_dim();

    let mut header = String::from("i,j,node,t");
    for i in 0..state_dim {
        header.push_str(&format!(",mu{i}"));
    }
    for r in 0..state_dim {
        for c in r..state_dim {
            header.push_str(&format!(",s{r}{c}"));
        }
    }
    for r in 0..control_dim {
        for c in 0..state_dim {
            header.push_str(&format!(",k{r}{c}"));
        }
    }
    header.push_str(",lambda\n");
    file.write_all(header.as_bytes())?;

    for (bridge, lambda) in bridges.iter().zip(lambdas.iter()) {
        let grid = &bridge.ltv.grid;
        for k in 0..grid.len() {
            let mut row = format!(
                "{},{},{k},{}",
                bridge.pair.0,
                bridge.pair.1,
                fmt_float(grid.node(k))
            );
            for v in bridge.ltv.reference_states[k].iter() {
                row.push(',');
                row.push_str(&fmt_float(*v));
            }
            let sigma = &bridge.covariances[k];
            for r in 0..state_dim {
                for c in r..state_dim {
                    row.push(',');
                    row.push_str(&fmt_float(sigma[(r, c)]));
                }
            }
            if k < grid.interval_count() {
                let gain = &bridge.gains[k];
                for r in 0..control_dim {
                    for c in 0..state_dim {
                        row.push(',');
                        row.push_str(&fmt_float(gain[(r, c)]));
                    }
                }
            } else {
                for _ in 0..control_dim * state_dim {
                    row.push(',');
                    row.push_str(&fmt_float(0.0));
                }
            }
            row.push(',');
            row.push_str(&fmt_float(*lambda));
            row.push('\n');
            file.write_all(row.as_bytes())?;
        }
    }
    Ok(())
}
