//! JSON messages exchanged with clients, one object per line or frame.

use serde::{Deserialize, Serialize};

/// Driver request in position terms: steering angle and total torque.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Command {
    pub steer: f64,
    pub torque: f64,
    pub seq: u64,
}

/// One telemetry frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub t: f64,
    pub s: f64,
    pub e: f64,
    pub dphi: f64,
    #[serde(rename = "V_speed")]
    pub v_speed: f64,
    pub r: f64,
    pub beta: f64,
    pub delta: f64,
    pub tau: f64,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    pub psi: f64,
    pub value: f64,
    pub u_d: Vec<f64>,
    pub u_out: Vec<f64>,
    pub intervened: bool,
    pub missed_ticks: u64,
    /// Latest command sequence number applied this tick.
    pub seq: u64,
    pub filter_enabled: bool,
    pub safe_stop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Command(Command),
    Reset,
    ToggleFilter {
        enabled: bool,
    },
    State(StateFrame),
    /// The state left the corridor (`h < 0`) at this tick.
    Violation {
        t: f64,
        e: f64,
        h: f64,
    },
    /// The value source could not be evaluated; the session is holding a
    /// safe stop.
    SafeStop {
        t: f64,
        reason: String,
    },
    Error {
        message: String,
    },
}

impl WireMessage {
    /// Serialize as a single line without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("wire messages serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line.trim())
    }

    /// Non-finite floats cannot cross the wire as JSON numbers.
    pub fn is_finite(&self) -> bool {
        match self {
            WireMessage::Command(c) => c.steer.is_finite() && c.torque.is_finite(),
            WireMessage::State(s) => [
                s.t, s.s, s.e, s.dphi, s.v_speed, s.r, s.beta, s.delta, s.tau, s.x, s.y, s.psi,
                s.value,
            ]
            .iter()
            .chain(&s.u_d)
            .chain(&s.u_out)
            .all(|v| v.is_finite()),
            WireMessage::Violation { t, e, h } => t.is_finite() && e.is_finite() && h.is_finite(),
            WireMessage::SafeStop { t, .. } => t.is_finite(),
            WireMessage::Reset | WireMessage::ToggleFilter { .. } | WireMessage::Error { .. } => {
                true
            }
        }
    }
}
