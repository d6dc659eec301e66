//! Versioned JSON parameter files for the vehicle, tire and track.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    extend_with_implicit_box, single_track_model, vehicle_index as ix, DynamicsError,
    ImplicitBoxSystem, TireModel, TrackGeometry, VehicleParams,
};

pub const SCHEMA_VERSION: u32 = 1;

const DEFAULT_VEHICLE: &str = include_str!("../../params/vehicle_default.json");

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed parameter file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub vehicle: VehicleParams,
    pub tire: TireModel,
    pub track: TrackGeometry,
    /// Implicit-box blend width as a fraction of each input's position bound.
    pub smoothing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackConfig {
    pub schema_version: u32,
    pub track: TrackGeometry,
}

fn check_version(found: u32) -> Result<(), ParamError> {
    if found != SCHEMA_VERSION {
        return Err(ParamError::Version {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

impl Default for VehicleConfig {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_VEHICLE).expect("bundled vehicle parameters parse")
    }
}

impl VehicleConfig {
    pub fn from_json(text: &str) -> Result<Self, ParamError> {
        let cfg: Self = serde_json::from_str(text)?;
        check_version(cfg.schema_version)?;
        cfg.vehicle.validate()?;
        cfg.tire.validate()?;
        cfg.track.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The single-track model with steering and torque limits enforced
    /// implicitly.
    pub fn build(&self) -> Result<ImplicitBoxSystem, DynamicsError> {
        let base = single_track_model(self.vehicle.clone(), self.tire.clone(), self.track)?;
        extend_with_implicit_box(
            Arc::new(base),
            &[ix::DELTA, ix::TAU],
            &[self.vehicle.steer_rate_max, self.vehicle.torque_rate_max],
            &[self.vehicle.steer_max, self.vehicle.torque_max],
            self.smoothing,
        )
    }
}

impl TrackConfig {
    pub fn from_json(text: &str) -> Result<Self, ParamError> {
        let cfg: Self = serde_json::from_str(text)?;
        check_version(cfg.schema_version)?;
        cfg.track.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
