//! Common interface for anything that can back the safety filter: the
//! exact grid solution or a trained network.

use std::fmt;

use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValueError {
    #[error("coordinate {axis} = {value} outside [{min}, {max}]")]
    Extrapolation {
        axis: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("time-to-go {tau} outside [0, {horizon}]")]
    TimeOutOfRange { tau: f64, horizon: f64 },
    #[error("state has {got} components, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueSample {
    pub value: f64,
    pub grad_x: DVector<f64>,
    /// Derivative with respect to time-to-go.
    pub dv_dtau: f64,
}

pub trait ValueSource: Send + Sync + fmt::Debug {
    fn evaluate(&self, x: &[f64], tau: f64) -> Result<ValueSample, ValueError>;
    fn state_dim(&self) -> usize;
    /// Largest time-to-go the source was built for.
    fn horizon(&self) -> f64;

    fn value(&self, x: &[f64], tau: f64) -> Result<f64, ValueError> {
        Ok(self.evaluate(x, tau)?.value)
    }
}

/// A value source that is the same everywhere; useful as a degenerate
/// reference in tests and evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantValue {
    pub value: f64,
    pub dim: usize,
    pub horizon: f64,
}

impl ValueSource for ConstantValue {
    fn evaluate(&self, x: &[f64], _tau: f64) -> Result<ValueSample, ValueError> {
        if x.len() != self.dim {
            return Err(ValueError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(ValueSample {
            value: self.value,
            grad_x: DVector::zeros(self.dim),
            dv_dtau: 0.0,
        })
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }
}

pub(crate) fn check_tau(tau: f64, horizon: f64) -> Result<(), ValueError> {
    // allow rounding slop at the ends of the horizon
    let slop = 1e-9 * (1.0 + horizon);
    if !(tau >= -slop && tau <= horizon + slop) {
        return Err(ValueError::TimeOutOfRange { tau, horizon });
    }
    Ok(())
}
