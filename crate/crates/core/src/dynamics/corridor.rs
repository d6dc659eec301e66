use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ControlAffine, ControlSet, DynamicsError, SafetyCorridor, StateBox, TrackGeometry};

/// Two-state kinematic corridor: lateral error `e` and course error `Δφ` at a
/// fixed speed, steered by commanded path curvature.
///
/// ```text
/// ė  = V sin Δφ
/// Δφ̇ = V u − κ_ref V cos Δφ / (1 − κ_ref e)
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorridorModel {
    pub speed: f64,
    pub curvature_bound: f64,
    /// Reference curvature of the segment being modeled (0 on a straight).
    pub kappa_ref: f64,
    pub half_width: f64,
    region: StateBox,
    controls: ControlSet,
}

/// Build the corridor model on a straight segment of `track`.
pub fn kinematic_corridor_model(
    speed: f64,
    curvature_bound: f64,
    track: &TrackGeometry,
) -> Result<CorridorModel, DynamicsError> {
    CorridorModel::new(speed, curvature_bound, 0.0, track.half_width)
}

impl CorridorModel {
    pub fn new(
        speed: f64,
        curvature_bound: f64,
        kappa_ref: f64,
        half_width: f64,
    ) -> Result<Self, DynamicsError> {
        if !(speed > 0.0 && speed.is_finite()) {
            return Err(DynamicsError::InvalidParameter("speed must be > 0".into()));
        }
        if !(curvature_bound > 0.0 && curvature_bound.is_finite()) {
            return Err(DynamicsError::InvalidParameter(
                "curvature bound must be > 0".into(),
            ));
        }
        if !kappa_ref.is_finite() || !(half_width > 0.0) {
            return Err(DynamicsError::InvalidParameter(
                "kappa_ref must be finite and half_width positive".into(),
            ));
        }
        let region = StateBox::new(vec![-(half_width + 0.5), -1.0], vec![half_width + 0.5, 1.0])?;
        Ok(Self {
            speed,
            curvature_bound,
            kappa_ref,
            half_width,
            region,
            controls: ControlSet::symmetric_box(vec![curvature_bound])?,
        })
    }

    /// Same model evaluated on a turn of the given track.
    pub fn on_turn(mut self, track: &TrackGeometry) -> Self {
        self.kappa_ref = 1.0 / track.turn_radius;
        self
    }

    pub fn with_sampling_region(mut self, region: StateBox) -> Result<Self, DynamicsError> {
        if region.dim() != 2 {
            return Err(DynamicsError::DimensionMismatch {
                expected: 2,
                got: region.dim(),
            });
        }
        self.region = region;
        Ok(self)
    }

    fn denominator(&self, e: f64) -> Result<f64, DynamicsError> {
        if self.kappa_ref != 0.0 && e.abs() >= 1.0 / self.kappa_ref.abs() {
            return Err(DynamicsError::Domain(format!(
                "|e| = {} reaches the turn center radius {}",
                e.abs(),
                1.0 / self.kappa_ref.abs()
            )));
        }
        Ok(1.0 - self.kappa_ref * e)
    }

    fn check(&self, x: &DVector<f64>) -> Result<(), DynamicsError> {
        if x.len() != 2 {
            return Err(DynamicsError::DimensionMismatch {
                expected: 2,
                got: x.len(),
            });
        }
        Ok(())
    }
}

impl ControlAffine for CorridorModel {
    fn name(&self) -> String {
        format!(
            "corridor(V={},ubar={},kappa={},w={})",
            self.speed, self.curvature_bound, self.kappa_ref, self.half_width
        )
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        self.check(x)?;
        let (e, dphi) = (x[0], x[1]);
        let den = self.denominator(e)?;
        let v = self.speed;
        Ok(DVector::from_vec(vec![
            v * dphi.sin(),
            -self.kappa_ref * v * dphi.cos() / den,
        ]))
    }

    fn input_matrix(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        self.check(x)?;
        Ok(DMatrix::from_column_slice(2, 1, &[0.0, self.speed]))
    }

    fn drift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        self.check(x)?;
        let (e, dphi) = (x[0], x[1]);
        let den = self.denominator(e)?;
        let (v, k) = (self.speed, self.kappa_ref);
        Ok(DMatrix::from_row_slice(
            2,
            2,
            &[
                0.0,
                v * dphi.cos(),
                -k * k * v * dphi.cos() / (den * den),
                k * v * dphi.sin() / den,
            ],
        ))
    }

    fn input_jacobian(&self, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>, DynamicsError> {
        self.check(x)?;
        Ok(vec![DMatrix::zeros(2, 1); 2])
    }

    fn control_set(&self) -> &ControlSet {
        &self.controls
    }

    fn constraint(&self, x: &DVector<f64>) -> f64 {
        self.corridor().margin(x.as_slice())
    }

    fn constraint_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.corridor().gradient(x.as_slice())
    }

    fn sampling_region(&self) -> &StateBox {
        &self.region
    }

    fn safety_corridor(&self) -> Option<SafetyCorridor> {
        Some(self.corridor())
    }
}

impl CorridorModel {
    fn corridor(&self) -> SafetyCorridor {
        SafetyCorridor {
            axis: 0,
            half_width: self.half_width,
        }
    }
}
