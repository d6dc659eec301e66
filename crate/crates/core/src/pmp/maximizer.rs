use nalgebra::DVector;

use super::PmpError;
use crate::dynamics::{sign, ControlAffine, ControlSet, DynamicsError};

/// Below this norm a ball direction is treated as zero.
pub const SINGULAR_TOL: f64 = 1e-12;

/// `argmax_{u ∈ U} vᵀu`.
///
/// Box components with `v_j = 0` return the box center, which leaves the
/// objective unchanged. Ball sets have no unique maximizer at `v = 0`.
pub fn closed_form_maximizer(v: &[f64], set: &ControlSet) -> Result<DVector<f64>, PmpError> {
    match set {
        ControlSet::Box {
            center,
            half_widths,
        } => Ok(DVector::from_iterator(
            v.len(),
            v.iter()
                .zip(center.iter().zip(half_widths))
                .map(|(v, (c, w))| c + w * sign(*v)),
        )),
        ControlSet::Ball { center, radius } => {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= SINGULAR_TOL {
                return Err(PmpError::SingularDirection { norm });
            }
            Ok(DVector::from_iterator(
                v.len(),
                v.iter().zip(center).map(|(v, c)| c + radius * v / norm),
            ))
        }
    }
}

/// Support function `max_{u ∈ U} vᵀu` (defined everywhere, including `v = 0`).
pub fn support(v: &[f64], set: &ControlSet) -> f64 {
    match set {
        ControlSet::Box {
            center,
            half_widths,
        } => v
            .iter()
            .zip(center.iter().zip(half_widths))
            .map(|(v, (c, w))| v * c + v.abs() * w)
            .sum(),
        ControlSet::Ball { center, radius } => {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().zip(center).map(|(v, c)| v * c).sum::<f64>() + radius * norm
        }
    }
}

/// Optimal Hamiltonian `max_u pᵀ(f(x) + g(x)u)`.
pub fn hamiltonian(
    system: &dyn ControlAffine,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<f64, DynamicsError> {
    let f = system.drift(x)?;
    let g = system.input_matrix(x)?;
    let v = g.transpose() * p;
    Ok(p.dot(&f) + support(v.as_slice(), system.control_set()))
}
