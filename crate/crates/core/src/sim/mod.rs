//! Shared-control sessions: a fixed-tick simulation that passes live driver
//! requests through the barrier filter and reports telemetry.
//!
//! [`Session`] is the deterministic core (one call to [`Session::tick`] per
//! period). [`server`] wraps it in a real-time loop with a latest-wins
//! command mailbox and drop-oldest telemetry queues, and serves clients
//! over line-delimited TCP or WebSocket on the same port.

mod log;
pub mod server;
mod wire;

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::params::VehicleConfig;
use crate::dynamics::{
    frenet_to_global, integrate_hold, kinematic_corridor_model, vehicle_index as vx, ControlAffine,
    CorridorModel, DynamicsError, ImplicitBoxSystem, TrackGeometry,
};
use crate::filter::{filter_step, FilterError, FilterOptions};
use crate::value_source::{ValueError, ValueSource};

pub use log::{replay_log, LogRecord, Replay, TrajectoryPoint, LOG_SCHEMA_VERSION};
pub use wire::{Command, StateFrame, WireMessage};

pub const MAX_TICK_RATE: f64 = 200.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid session configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed log or message: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported log schema_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("websocket error: {0}")]
    WebSocket(#[from] tungstenite::Error),
}

/// What the simulated plant is; enough to rebuild it for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantSpec {
    /// Constant-speed corridor steered by curvature. Steering requests map
    /// to curvature through a kinematic bicycle of the given wheelbase.
    Corridor {
        speed: f64,
        curvature_bound: f64,
        track: TrackGeometry,
        on_turn: bool,
        wheelbase: f64,
    },
    /// Single-track model with rate inputs and implicit position limits.
    Vehicle { config: VehicleConfig },
}

#[derive(Debug, Clone)]
pub enum Plant {
    Corridor {
        model: CorridorModel,
        wheelbase: f64,
    },
    Vehicle {
        system: ImplicitBoxSystem,
        track: TrackGeometry,
        steer_max: f64,
    },
}

impl PlantSpec {
    pub fn build(&self) -> Result<Plant, SimError> {
        match self {
            PlantSpec::Corridor {
                speed,
                curvature_bound,
                track,
                on_turn,
                wheelbase,
            } => {
                if !(*wheelbase > 0.0) {
                    return Err(SimError::Config("wheelbase must be positive".into()));
                }
                let mut model = kinematic_corridor_model(*speed, *curvature_bound, track)?;
                if *on_turn {
                    model = model.on_turn(track);
                }
                Ok(Plant::Corridor {
                    model,
                    wheelbase: *wheelbase,
                })
            }
            PlantSpec::Vehicle { config } => Ok(Plant::Vehicle {
                system: config.build()?,
                track: config.track,
                steer_max: config.vehicle.steer_max,
            }),
        }
    }
}

impl Plant {
    pub fn system(&self) -> &dyn ControlAffine {
        match self {
            Plant::Corridor { model, .. } => model,
            Plant::Vehicle { system, .. } => system,
        }
    }

    /// Centered, aligned with the path; the vehicle rolls at 8 m/s with
    /// its discount state at the sampling-region midpoint.
    pub fn default_initial_state(&self) -> Vec<f64> {
        match self {
            Plant::Corridor { .. } => vec![0.0, 0.0],
            Plant::Vehicle { system, .. } => {
                let mut x = vec![0.0; vx::DIM];
                x[vx::V] = 8.0;
                x[vx::GAMMA] = system.sampling_region().center()[vx::GAMMA];
                x
            }
        }
    }

    fn clamp_to_box(&self, u: Vec<f64>) -> Vec<f64> {
        self.system().control_set().project(&u)
    }

    /// Driver positions to model inputs. The corridor takes curvature
    /// directly; the vehicle takes rates, `u_d = K (request − state)`.
    pub fn desired_input(&self, cmd: &Command, x: &[f64], gains: &[f64]) -> Vec<f64> {
        match self {
            Plant::Corridor { wheelbase, .. } => {
                self.clamp_to_box(vec![cmd.steer.tan() / wheelbase])
            }
            Plant::Vehicle { .. } => self.clamp_to_box(vec![
                gains[0] * (cmd.steer - x[vx::DELTA]),
                gains[1] * (cmd.torque - x[vx::TAU]),
            ]),
        }
    }

    /// Zero torque and steering back toward the centerline.
    pub fn safe_stop_input(&self, x: &[f64], gains: &[f64]) -> Vec<f64> {
        match self {
            Plant::Corridor { model, .. } => self.clamp_to_box(vec![
                model.kappa_ref - 0.05 * x[0] - 0.5 * x[1] / model.speed,
            ]),
            Plant::Vehicle { steer_max, .. } => {
                let steer = (-0.1 * x[vx::E] - 0.5 * x[vx::DPHI]).clamp(-steer_max, *steer_max);
                self.clamp_to_box(vec![
                    gains[0] * (steer - x[vx::DELTA]),
                    gains[1] * (0.0 - x[vx::TAU]),
                ])
            }
        }
    }

    /// Rate of path progress; the corridor tracks it outside the model.
    fn progress_rate(&self, x: &[f64]) -> f64 {
        match self {
            Plant::Corridor { model, .. } => {
                model.speed * x[1].cos() / (1.0 - model.kappa_ref * x[0])
            }
            Plant::Vehicle { .. } => 0.0,
        }
    }

    fn frame_fields(&self, x: &[f64], s: f64, u: &[f64]) -> [f64; 11] {
        match self {
            Plant::Corridor {
                model, wheelbase, ..
            } => {
                let (e, dphi) = (x[0], x[1]);
                let (px, py, psi) = if model.kappa_ref == 0.0 {
                    (s, e, dphi)
                } else {
                    // a circle of the turn radius, centered to the left
                    let r = 1.0 / model.kappa_ref;
                    let th = s / r;
                    ((r - e) * th.sin(), r - (r - e) * th.cos(), th + dphi)
                };
                let curvature = u.first().copied().unwrap_or(0.0);
                [
                    s,
                    e,
                    dphi,
                    model.speed,
                    model.speed * curvature,
                    0.0,
                    (curvature * wheelbase).atan(),
                    0.0,
                    px,
                    py,
                    wrap_pi(psi),
                ]
            }
            Plant::Vehicle { track, .. } => {
                let pose = frenet_to_global(track, x[vx::S], x[vx::E], x[vx::DPHI]);
                [
                    x[vx::S],
                    x[vx::E],
                    x[vx::DPHI],
                    x[vx::V],
                    x[vx::R],
                    x[vx::BETA],
                    x[vx::DELTA],
                    x[vx::TAU],
                    pose.x,
                    pose.y,
                    pose.psi,
                ]
            }
        }
    }

    /// Wrap path progress for the vehicle so it stays inside the track
    /// length.
    fn normalize(&self, x: &mut [f64]) {
        if let Plant::Vehicle { track, .. } = self {
            x[vx::S] = track.wrap(x[vx::S]);
        }
    }
}

fn wrap_pi(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdlePolicy {
    /// Keep applying the last command received.
    HoldLast,
    /// Act as if the driver released everything.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub tick_rate: f64,
    pub filter_enabled: bool,
    /// Rate-shaping gains (1/s) for the vehicle's steering and torque.
    pub gains: Vec<f64>,
    pub idle: IdlePolicy,
    /// Time-to-go the filter queries; the value source's horizon if `None`.
    pub query_tau: Option<f64>,
    pub filter: FilterOptions,
    pub substeps: usize,
    pub initial_state: Option<Vec<f64>>,
    /// Entries kept in the in-memory log ring.
    pub log_capacity: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            tick_rate: 50.0,
            filter_enabled: true,
            gains: vec![5.0, 5.0],
            idle: IdlePolicy::HoldLast,
            query_tau: None,
            filter: FilterOptions::default(),
            substeps: 4,
            initial_state: None,
            log_capacity: 1024,
        }
    }
}

pub struct Session {
    pub id: u64,
    pub spec: PlantSpec,
    plant: Plant,
    source: Arc<dyn ValueSource>,
    cfg: SessionConfig,
    x: Vec<f64>,
    progress: f64,
    t: f64,
    tick_index: u64,
    command: Option<Command>,
    applied_seq: u64,
    filter_enabled: bool,
    missed_ticks: u64,
    violations: u64,
    safe_stop: Option<String>,
    halted: Option<String>,
    pending_events: Vec<LogRecord>,
    recent: VecDeque<LogRecord>,
    sink: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("t", &self.t)
            .field("x", &self.x)
            .finish_non_exhaustive()
    }
}

impl Session {
    pub fn new(
        id: u64,
        spec: PlantSpec,
        source: Arc<dyn ValueSource>,
        cfg: SessionConfig,
    ) -> Result<Self, SimError> {
        if !(cfg.tick_rate > 0.0 && cfg.tick_rate <= MAX_TICK_RATE) {
            return Err(SimError::Config(format!(
                "tick rate {} outside (0, {MAX_TICK_RATE}]",
                cfg.tick_rate
            )));
        }
        if cfg.substeps == 0 || cfg.gains.len() < 2 {
            return Err(SimError::Config(
                "need substeps and two shaping gains".into(),
            ));
        }
        let plant = spec.build()?;
        let n = plant.system().state_dim();
        if source.state_dim() != n {
            return Err(SimError::Config(format!(
                "value source has {} states, plant has {n}",
                source.state_dim()
            )));
        }
        let x = cfg
            .initial_state
            .clone()
            .unwrap_or_else(|| plant.default_initial_state());
        if x.len() != n {
            return Err(SimError::Config("initial state has the wrong size".into()));
        }
        Ok(Self {
            id,
            spec,
            plant,
            source,
            filter_enabled: cfg.filter_enabled,
            cfg,
            x,
            progress: 0.0,
            t: 0.0,
            tick_index: 0,
            command: None,
            applied_seq: 0,
            missed_ticks: 0,
            violations: 0,
            safe_stop: None,
            halted: None,
            pending_events: Vec::new(),
            recent: VecDeque::new(),
            sink: None,
        })
    }

    /// Stream the JSON-lines log to `sink`, starting with its header.
    pub fn with_log_sink(mut self, mut sink: Box<dyn Write + Send>) -> Result<Self, SimError> {
        let header = LogRecord::Header {
            schema_version: LOG_SCHEMA_VERSION,
            plant: self.spec.clone(),
            config: self.cfg.clone(),
            initial_state: self.x.clone(),
        };
        writeln!(sink, "{}", serde_json::to_string(&header)?)?;
        self.sink = Some(sink);
        Ok(self)
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn tick_period(&self) -> f64 {
        1.0 / self.cfg.tick_rate
    }

    pub fn filter_enabled(&self) -> bool {
        self.filter_enabled
    }

    pub fn missed_ticks(&self) -> u64 {
        self.missed_ticks
    }

    pub fn violations(&self) -> u64 {
        self.violations
    }

    pub fn in_safe_stop(&self) -> bool {
        self.safe_stop.is_some()
    }

    pub fn applied_seq(&self) -> u64 {
        self.applied_seq
    }

    pub fn recent_log(&self) -> impl Iterator<Item = &LogRecord> {
        self.recent.iter()
    }

    pub fn record_missed(&mut self, count: u64) {
        self.missed_ticks += count;
    }

    /// Apply a client message. Commands older than the latest applied one
    /// are ignored; server-side messages are rejected.
    pub fn handle(&mut self, msg: &WireMessage) -> Result<(), SimError> {
        match msg {
            WireMessage::Command(c) => {
                if !(c.steer.is_finite() && c.torque.is_finite()) {
                    return Err(SimError::Config("non-finite command".into()));
                }
                if self.command.is_none_or(|prev| c.seq >= prev.seq) {
                    self.command = Some(*c);
                }
            }
            WireMessage::Reset => {
                self.x = self
                    .cfg
                    .initial_state
                    .clone()
                    .unwrap_or_else(|| self.plant.default_initial_state());
                self.progress = 0.0;
                self.safe_stop = None;
                self.halted = None;
                self.pending_events.push(LogRecord::Reset {
                    tick: self.tick_index,
                });
            }
            WireMessage::ToggleFilter { enabled } => {
                self.filter_enabled = *enabled;
                if !enabled {
                    self.safe_stop = None;
                }
                self.pending_events.push(LogRecord::Filter {
                    tick: self.tick_index,
                    enabled: *enabled,
                });
            }
            other => {
                return Err(SimError::Config(format!(
                    "clients cannot send {}",
                    other.to_line()
                )))
            }
        }
        Ok(())
    }

    fn effective_command(&self) -> Command {
        self.command.unwrap_or_default()
    }

    fn log(&mut self, rec: LogRecord) -> Result<(), SimError> {
        if let Some(sink) = self.sink.as_mut() {
            writeln!(sink, "{}", serde_json::to_string(&rec)?)?;
        }
        if self.cfg.log_capacity > 0 {
            if self.recent.len() == self.cfg.log_capacity {
                self.recent.pop_front();
            }
            self.recent.push_back(rec);
        }
        Ok(())
    }

    pub fn flush_log(&mut self) -> Result<(), SimError> {
        if let Some(sink) = self.sink.as_mut() {
            sink.flush()?;
        }
        Ok(())
    }

    /// Advance one period and return the messages for clients.
    pub fn tick(&mut self) -> Result<Vec<WireMessage>, SimError> {
        for ev in std::mem::take(&mut self.pending_events) {
            self.log(ev)?;
        }
        let mut out = Vec::new();
        let dt = self.tick_period();
        let cmd = self.effective_command();
        if self.command.is_some() {
            self.applied_seq = cmd.seq;
        }
        if self.command.is_some() && self.cfg.idle == IdlePolicy::Zero {
            // consumed; the next tick without a new command is idle
            self.command = Some(Command {
                seq: cmd.seq,
                ..Command::default()
            });
        }
        let system = self.plant.system();
        let u_d = self.plant.desired_input(&cmd, &self.x, &self.cfg.gains);
        let tau = self.cfg.query_tau.unwrap_or_else(|| self.source.horizon());

        let mut value = None;
        let mut intervened = false;
        let u_out = if self.halted.is_some() {
            vec![0.0; u_d.len()]
        } else if self.filter_enabled && self.safe_stop.is_none() {
            match filter_step(&*self.source, system, &self.x, tau, &u_d, &self.cfg.filter) {
                Ok(r) => {
                    value = Some(r.value);
                    intervened = r.intervened;
                    r.u_out
                }
                Err(e) => {
                    let reason = e.to_string();
                    out.push(WireMessage::SafeStop {
                        t: self.t,
                        reason: reason.clone(),
                    });
                    self.safe_stop = Some(reason);
                    self.plant.safe_stop_input(&self.x, &self.cfg.gains)
                }
            }
        } else if self.safe_stop.is_some() {
            self.plant.safe_stop_input(&self.x, &self.cfg.gains)
        } else {
            u_d.clone()
        };
        if self.safe_stop.is_some() {
            intervened = true;
        }
        // telemetry still wants V when the filter is off
        let value = value.unwrap_or_else(|| {
            self.source
                .value(&self.x, tau)
                .unwrap_or_else(|_| system.constraint(&DVector::from_row_slice(&self.x)))
        });

        let x_before = self.x.clone();
        if self.halted.is_none() {
            let next = integrate_hold(
                system,
                &DVector::from_row_slice(&self.x),
                &DVector::from_row_slice(&u_out),
                dt,
                self.cfg.substeps,
            );
            match next {
                Ok(next) if next.iter().all(|v| v.is_finite()) => {
                    self.progress += dt * self.plant.progress_rate(&self.x);
                    self.x = next.as_slice().to_vec();
                    self.plant.normalize(&mut self.x);
                }
                Ok(_) => self.halted = Some("non-finite state".into()),
                Err(e) => self.halted = Some(e.to_string()),
            }
            if let Some(reason) = &self.halted {
                out.push(WireMessage::Error {
                    message: format!("simulation halted: {reason}; send reset"),
                });
            }
        }
        self.t += dt;
        self.tick_index += 1;

        let h = system.constraint(&DVector::from_row_slice(&self.x));
        if h < 0.0 {
            self.violations += 1;
            let e = match self.plant {
                Plant::Corridor { .. } => self.x[0],
                Plant::Vehicle { .. } => self.x[vx::E],
            };
            out.push(WireMessage::Violation { t: self.t, e, h });
        }

        self.log(LogRecord::Tick {
            tick: self.tick_index - 1,
            t: self.t,
            command: cmd,
            filter_enabled: self.filter_enabled,
            x_before,
            u_d: u_d.clone(),
            u_out: u_out.clone(),
            value,
            intervened,
            x: self.x.clone(),
        })?;

        let f = self.plant.frame_fields(&self.x, self.progress, &u_out);
        let s = match self.plant {
            Plant::Corridor { .. } => self.progress,
            Plant::Vehicle { .. } => f[0],
        };
        out.push(WireMessage::State(StateFrame {
            t: self.t,
            s,
            e: f[1],
            dphi: f[2],
            v_speed: f[3],
            r: f[4],
            beta: f[5],
            delta: f[6],
            tau: f[7],
            x: f[8],
            y: f[9],
            psi: f[10],
            value,
            u_d,
            u_out,
            intervened,
            missed_ticks: self.missed_ticks,
            seq: self.applied_seq,
            filter_enabled: self.filter_enabled,
            safe_stop: self.safe_stop.is_some(),
        }));
        Ok(out)
    }
}
