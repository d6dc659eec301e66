//! Control-affine systems `ẋ = f(x) + g(x)u` with a scalar safety margin `h`.
//!
//! Two concrete systems are provided: a two-state kinematic corridor used for
//! exact verification against the grid solver, and the full single-track
//! racing model with brush tires. Dynamically extended inputs can be wrapped
//! so their position limits are enforced implicitly by the dynamics.

mod corridor;
mod implicit_box;
pub mod params;
pub mod real;
mod track;
mod vehicle;

pub use corridor::{kinematic_corridor_model, CorridorModel};
pub use implicit_box::{extend_with_implicit_box, ImplicitBoxSystem};
pub use track::{frenet_to_global, global_to_frenet, GlobalPose, TrackGeometry};
pub use vehicle::{single_track_model, vehicle_index, SingleTrackModel, TireModel, VehicleParams};

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("state outside model domain: {0}")]
    Domain(String),
    #[error(
        "tire force coupling infeasible: zeta*Fx^2 = {coupled:.3e} >= (mu*Fz)^2 = {limit:.3e}"
    )]
    TireSaturation { coupled: f64, limit: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Admissible input set `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSet {
    Box {
        center: Vec<f64>,
        half_widths: Vec<f64>,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
}

impl ControlSet {
    pub fn symmetric_box(half_widths: Vec<f64>) -> Result<Self, DynamicsError> {
        let center = vec![0.0; half_widths.len()];
        Self::boxed(center, half_widths)
    }

    pub fn boxed(center: Vec<f64>, half_widths: Vec<f64>) -> Result<Self, DynamicsError> {
        if center.len() != half_widths.len() {
            return Err(DynamicsError::DimensionMismatch {
                expected: half_widths.len(),
                got: center.len(),
            });
        }
        if half_widths.is_empty() || half_widths.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(DynamicsError::InvalidParameter(
                "box half-widths must be finite and strictly positive".into(),
            ));
        }
        Ok(ControlSet::Box {
            center,
            half_widths,
        })
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self, DynamicsError> {
        if !(radius > 0.0 && radius.is_finite()) || center.is_empty() {
            return Err(DynamicsError::InvalidParameter(
                "ball radius must be finite and strictly positive".into(),
            ));
        }
        Ok(ControlSet::Ball { center, radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { center, .. } | ControlSet::Ball { center, .. } => center.len(),
        }
    }

    pub fn center(&self) -> &[f64] {
        match self {
            ControlSet::Box { center, .. } | ControlSet::Ball { center, .. } => center,
        }
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        match self {
            ControlSet::Box {
                center,
                half_widths,
            } => u
                .iter()
                .zip(center)
                .zip(half_widths)
                .all(|((u, c), w)| (u - c).abs() <= w + tol),
            ControlSet::Ball { center, radius } => {
                let d2: f64 = u.iter().zip(center).map(|(u, c)| (u - c).powi(2)).sum();
                d2.sqrt() <= radius + tol
            }
        }
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        match self {
            ControlSet::Box {
                center,
                half_widths,
            } => u
                .iter()
                .zip(center)
                .zip(half_widths)
                .map(|((u, c), w)| u.clamp(c - w, c + w))
                .collect(),
            ControlSet::Ball { center, radius } => {
                let d: Vec<f64> = u.iter().zip(center).map(|(u, c)| u - c).collect();
                let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n <= *radius {
                    u.to_vec()
                } else {
                    center
                        .iter()
                        .zip(&d)
                        .map(|(c, d)| c + d * radius / n)
                        .collect()
                }
            }
        }
    }
}

/// Axis-aligned box of states; the sampling region of a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StateBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, DynamicsError> {
        if lower.len() != upper.len() {
            return Err(DynamicsError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(DynamicsError::InvalidParameter(
                "state box needs lower < upper on every axis".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(x, (l, u))| *x >= *l && *x <= *u)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn half_extent(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(l, u)| rng.random_range(*l..*u)),
        )
    }

    pub fn contains_box(&self, other: &StateBox) -> bool {
        self.lower.iter().zip(&other.lower).all(|(a, b)| a <= b)
            && self.upper.iter().zip(&other.upper).all(|(a, b)| a >= b)
    }
}

/// `h(x) = half_width - |x[axis]|`: the track-edge constraint used by every
/// model here (lateral error within the road edges).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyCorridor {
    pub axis: usize,
    pub half_width: f64,
}

impl SafetyCorridor {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.half_width - x[self.axis].abs()
    }

    pub fn gradient(&self, x: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        g[self.axis] = -sign(x[self.axis]);
        g
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Control-affine system with a scalar safety constraint `h(x) >= 0`.
///
/// Evaluations are pure: identical inputs give bit-identical outputs.
pub trait ControlAffine: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError>;
    /// `n × m` input matrix.
    fn input_matrix(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError>;
    fn drift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError>;
    /// Entry `k` is `∂g/∂x_k` (an `n × m` matrix).
    fn input_jacobian(&self, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>, DynamicsError>;
    fn control_set(&self) -> &ControlSet;
    fn constraint(&self, x: &DVector<f64>) -> f64;
    fn constraint_gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn sampling_region(&self) -> &StateBox;

    /// The constrained coordinate when `h` is a corridor; enables analytic
    /// boundary sampling.
    fn safety_corridor(&self) -> Option<SafetyCorridor> {
        None
    }

    /// Index of a virtual zero-dynamics state carrying the discount rate.
    fn discount_index(&self) -> Option<usize> {
        None
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        if u.len() != self.control_dim() {
            return Err(DynamicsError::DimensionMismatch {
                expected: self.control_dim(),
                got: u.len(),
            });
        }
        Ok(self.drift(x)? + self.input_matrix(x)? * u)
    }
}

/// One classical RK4 step with the input held constant.
pub fn rk4_step(
    system: &dyn ControlAffine,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, DynamicsError> {
    let k1 = system.dynamics(x, u)?;
    let k2 = system.dynamics(&(x + &k1 * (0.5 * dt)), u)?;
    let k3 = system.dynamics(&(x + &k2 * (0.5 * dt)), u)?;
    let k4 = system.dynamics(&(x + &k3 * dt), u)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Advance `duration` seconds under a zero-order-hold input using `substeps`
/// RK4 steps.
pub fn integrate_hold(
    system: &dyn ControlAffine,
    x: &DVector<f64>,
    u: &DVector<f64>,
    duration: f64,
    substeps: usize,
) -> Result<DVector<f64>, DynamicsError> {
    let dt = duration / substeps.max(1) as f64;
    let mut state = x.clone();
    for _ in 0..substeps.max(1) {
        state = rk4_step(system, &state, u, dt)?;
    }
    Ok(state)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Central-difference Jacobian of `drift`.
    pub fn fd_drift_jacobian(system: &dyn ControlAffine, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
        let n = system.state_dim();
        let mut j = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let d = (system.drift(&xp).unwrap() - system.drift(&xm).unwrap()) / (2.0 * h);
            j.set_column(k, &d);
        }
        j
    }

    pub fn fd_input_jacobian(
        system: &dyn ControlAffine,
        x: &DVector<f64>,
        h: f64,
    ) -> Vec<DMatrix<f64>> {
        (0..system.state_dim())
            .map(|k| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                (system.input_matrix(&xp).unwrap() - system.input_matrix(&xm).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    /// Relative error with an absolute floor for entries near zero.
    pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let scale = b.norm().max(1.0);
        (a - b).norm() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_set_validation() {
        assert!(ControlSet::symmetric_box(vec![1.0, 0.0]).is_err());
        assert!(ControlSet::symmetric_box(vec![]).is_err());
        assert!(ControlSet::ball(vec![0.0], -1.0).is_err());
        let b = ControlSet::symmetric_box(vec![1.0, 2.0]).unwrap();
        assert!(b.contains(&[1.0, -2.0], 0.0));
        assert!(!b.contains(&[1.1, 0.0], 0.0));
        assert_eq!(b.project(&[3.0, -5.0]), vec![1.0, -2.0]);
        let ball = ControlSet::ball(vec![0.0, 0.0], 2.0).unwrap();
        let p = ball.project(&[3.0, 4.0]);
        assert!((p[0] - 1.2).abs() < 1e-15 && (p[1] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn corridor_constraint_gradient_sign() {
        let c = SafetyCorridor {
            axis: 0,
            half_width: 3.0,
        };
        assert_eq!(c.margin(&[2.0, 0.0]), 1.0);
        assert_eq!(c.gradient(&[2.0, 0.0])[0], -1.0);
        assert_eq!(c.gradient(&[-2.0, 0.0])[0], 1.0);
    }
}
