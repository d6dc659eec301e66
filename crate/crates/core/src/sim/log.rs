//! JSON-lines session logs and filter-free re-simulation.

use std::io::BufRead;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{Command, PlantSpec, SessionConfig, SimError};
use crate::dynamics::integrate_hold;

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        schema_version: u32,
        plant: PlantSpec,
        config: SessionConfig,
        initial_state: Vec<f64>,
    },
    /// State returned to the initial state before tick `tick`.
    Reset {
        tick: u64,
    },
    Filter {
        tick: u64,
        enabled: bool,
    },
    Tick {
        tick: u64,
        /// Time at the end of the tick.
        t: f64,
        command: Command,
        filter_enabled: bool,
        x_before: Vec<f64>,
        u_d: Vec<f64>,
        u_out: Vec<f64>,
        value: f64,
        intervened: bool,
        /// State at the end of the tick.
        x: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Replay {
    pub plant: Option<PlantSpec>,
    /// Logged states, one per tick.
    pub logged: Vec<Vec<f64>>,
    /// What the recorded driver commands do without the filter.
    pub counterfactual: Vec<TrajectoryPoint>,
    /// Set if the model left its domain and re-simulation stopped early.
    pub halted: Option<String>,
}

/// Re-run the recorded driver commands through the plant with the filter
/// disabled. Deterministic; an empty log gives an empty replay.
pub fn replay_log<R: BufRead>(reader: R) -> Result<Replay, SimError> {
    let mut lines = reader.lines();
    let header = loop {
        match lines.next() {
            None => return Ok(Replay::default()),
            Some(line) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let doc: serde_json::Value = serde_json::from_str(&header)?;
    let found = doc
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| SimError::Config("log does not start with a header".into()))?;
    if found != LOG_SCHEMA_VERSION as u64 {
        return Err(SimError::Version {
            found: found.min(u32::MAX as u64) as u32,
            expected: LOG_SCHEMA_VERSION,
        });
    }
    let LogRecord::Header {
        plant: spec,
        config,
        initial_state,
        ..
    } = serde_json::from_value(doc)?
    else {
        return Err(SimError::Config("log does not start with a header".into()));
    };
    let plant = spec.build()?;
    let system = plant.system();
    let dt = 1.0 / config.tick_rate;
    let mut x = initial_state.clone();
    let mut out = Replay {
        plant: Some(spec.clone()),
        ..Replay::default()
    };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogRecord>(&line)? {
            LogRecord::Header { .. } => {
                return Err(SimError::Config("second header in log".into()));
            }
            LogRecord::Reset { .. } => x = initial_state.clone(),
            LogRecord::Filter { .. } => {}
            LogRecord::Tick {
                t,
                command,
                x: logged,
                ..
            } => {
                out.logged.push(logged);
                if out.halted.is_some() {
                    continue;
                }
                let u = plant.desired_input(&command, &x, &config.gains);
                match integrate_hold(
                    system,
                    &DVector::from_row_slice(&x),
                    &DVector::from_row_slice(&u),
                    dt,
                    config.substeps,
                ) {
                    Ok(next) => {
                        x = next.as_slice().to_vec();
                        plant.normalize(&mut x);
                        out.counterfactual.push(TrajectoryPoint {
                            t,
                            h: system.constraint(&DVector::from_row_slice(&x)),
                            x: x.clone(),
                            u,
                        });
                    }
                    Err(e) => out.halted = Some(e.to_string()),
                }
            }
        }
    }
    Ok(out)
}
