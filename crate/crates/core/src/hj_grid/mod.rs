//! Exact grid solution of the discounted barrier value function for systems
//! with at most three states.
//!
//! Time is time-to-go `τ`: slice 0 is `ℓ(x)` and later slices look further
//! ahead. Values are stored for every slice so time derivatives and
//! level sets are available at any `τ` in the horizon.

mod io;
mod level_set;
mod solver;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, StateBox};
use crate::value_source::{check_tau, ValueError, ValueSample, ValueSource};

pub use io::{read_grid, write_grid, write_level_set_csv};
pub use level_set::{zero_level_set, LevelSet};
pub use solver::{solve_cbvf, solve_cbvf_with, CbvfOptions};

pub const MAX_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid configuration: {0}")]
    Config(String),
    #[error("non-finite value after step {step}")]
    NumericalBlowup { step: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed grid file: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, count: usize) -> Result<Self, GridError> {
        if !(min < max) || !min.is_finite() || !max.is_finite() || count < 2 {
            return Err(GridError::Config(format!(
                "axis [{min}, {max}] with {count} nodes"
            )));
        }
        Ok(Self { min, max, count })
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.count - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.min + i as f64 * self.spacing()
    }
}

/// Node layout shared by solver, interpolation and I/O. The last axis
/// varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>) -> Result<Self, GridError> {
        if axes.is_empty() || axes.len() > MAX_DIM {
            return Err(GridError::Config(format!(
                "grids support 1 to {MAX_DIM} dimensions, got {}",
                axes.len()
            )));
        }
        Ok(Self { axes })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dim()];
        for d in (0..self.dim().saturating_sub(1)).rev() {
            s[d] = s[d + 1] * self.axes[d + 1].count;
        }
        s
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            idx[d] = flat % self.axes[d].count;
            flat /= self.axes[d].count;
        }
        idx
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.coord(i))
            .collect()
    }

    pub fn bounds(&self) -> StateBox {
        StateBox::new(
            self.axes.iter().map(|a| a.min).collect(),
            self.axes.iter().map(|a| a.max).collect(),
        )
        .expect("axes are validated on construction")
    }

    pub fn spacings(&self) -> Vec<f64> {
        self.axes.iter().map(Axis::spacing).collect()
    }

    fn check_point(&self, x: &[f64]) -> Result<(), ValueError> {
        if x.len() != self.dim() {
            return Err(ValueError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        for (d, (a, &v)) in self.axes.iter().zip(x).enumerate() {
            let slop = 1e-12 * (a.max - a.min);
            if !(v >= a.min - slop && v <= a.max + slop) {
                return Err(ValueError::Extrapolation {
                    axis: d,
                    value: v,
                    min: a.min,
                    max: a.max,
                });
            }
        }
        Ok(())
    }

    /// Multilinear interpolation of `field` at `x` (assumed in bounds).
    fn interpolate(&self, field: &[f64], x: &[f64]) -> f64 {
        let n = self.dim();
        let strides = self.strides();
        let mut base = 0;
        let mut frac = [0.0; MAX_DIM];
        for d in 0..n {
            let a = &self.axes[d];
            let s = ((x[d] - a.min) / a.spacing()).clamp(0.0, (a.count - 1) as f64);
            let i = (s.floor() as usize).min(a.count - 2);
            frac[d] = s - i as f64;
            base += i * strides[d];
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            let mut idx = base;
            for d in 0..n {
                if corner >> d & 1 == 1 {
                    w *= frac[d];
                    idx += strides[d];
                } else {
                    w *= 1.0 - frac[d];
                }
            }
            if w != 0.0 {
                acc += w * field[idx];
            }
        }
        acc
    }
}

/// Grid slices of the value function over time-to-go.
#[derive(Debug, Clone, PartialEq)]
pub struct GridValueFunction {
    pub spec: GridSpec,
    /// `slices[k]` holds the value at `τ = k·dt`.
    pub slices: Vec<Vec<f64>>,
    pub gamma: f64,
    /// Spacing of the stored slices in time-to-go.
    pub dt: f64,
    pub system_id: String,
}

impl GridValueFunction {
    pub fn horizon(&self) -> f64 {
        self.dt * (self.slices.len() - 1) as f64
    }

    pub fn slice_time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Bracketing slice index and blend weight for `τ`.
    fn bracket(&self, tau: f64) -> (usize, f64) {
        let last = self.slices.len() - 1;
        if last == 0 {
            return (0, 0.0);
        }
        let s = (tau / self.dt).clamp(0.0, last as f64);
        let k = (s.floor() as usize).min(last - 1);
        (k, (s - k as f64).clamp(0.0, 1.0))
    }

    /// The whole value field at `τ`, blending the bracketing slices.
    pub fn field_at(&self, tau: f64) -> Result<Vec<f64>, ValueError> {
        check_tau(tau, self.horizon())?;
        let (k, w) = self.bracket(tau);
        if w == 0.0 {
            return Ok(self.slices[k].clone());
        }
        Ok(self.slices[k]
            .iter()
            .zip(&self.slices[k + 1])
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect())
    }

    fn value_in_bounds(&self, x: &[f64], k: usize, w: f64) -> f64 {
        let v0 = self.spec.interpolate(&self.slices[k], x);
        if w == 0.0 {
            return v0;
        }
        let v1 = self.spec.interpolate(&self.slices[k + 1], x);
        (1.0 - w) * v0 + w * v1
    }
}

impl ValueSource for GridValueFunction {
    fn evaluate(&self, x: &[f64], tau: f64) -> Result<ValueSample, ValueError> {
        self.spec.check_point(x)?;
        check_tau(tau, self.horizon())?;
        let (k, w) = self.bracket(tau);
        let value = self.value_in_bounds(x, k, w);

        let mut grad = DVector::zeros(x.len());
        let mut probe = x.to_vec();
        for d in 0..x.len() {
            let a = &self.spec.axes[d];
            let h = 0.5 * a.spacing();
            let hi = (x[d] + h).min(a.max);
            let lo = (x[d] - h).max(a.min);
            probe[d] = hi;
            let vp = self.value_in_bounds(&probe, k, w);
            probe[d] = lo;
            let vm = self.value_in_bounds(&probe, k, w);
            probe[d] = x[d];
            grad[d] = (vp - vm) / (hi - lo);
        }

        let dv_dtau = if self.slices.len() > 1 {
            (self.spec.interpolate(&self.slices[k + 1], x)
                - self.spec.interpolate(&self.slices[k], x))
                / self.dt
        } else {
            0.0
        };
        Ok(ValueSample {
            value,
            grad_x: grad,
            dv_dtau,
        })
    }

    fn state_dim(&self) -> usize {
        self.spec.dim()
    }

    fn horizon(&self) -> f64 {
        GridValueFunction::horizon(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec::new(vec![
            Axis::new(-4.0, 4.0, 41).unwrap(),
            Axis::new(-1.0, 1.0, 21).unwrap(),
        ])
        .unwrap()
    }

    fn linear_field(spec: &GridSpec, c: [f64; 3]) -> Vec<f64> {
        (0..spec.len())
            .map(|i| {
                let x = spec.node(i);
                c[0] + c[1] * x[0] + c[2] * x[1]
            })
            .collect()
    }

    fn vf(slices: Vec<Vec<f64>>) -> GridValueFunction {
        GridValueFunction {
            spec: spec(),
            slices,
            gamma: 0.0,
            dt: 0.5,
            system_id: "test".into(),
        }
    }

    #[test]
    fn index_roundtrip() {
        let s = spec();
        for flat in [0, 1, 20, 21, 500, s.len() - 1] {
            let idx = s.multi_index(flat);
            let back: usize = idx.iter().zip(s.strides()).map(|(i, st)| i * st).sum();
            assert_eq!(back, flat);
        }
    }

    #[test]
    fn stored_nodes_are_reproduced_exactly() {
        let s = spec();
        let f0 = linear_field(&s, [0.3, 1.0, -2.0]);
        let f1: Vec<f64> = f0.iter().map(|v| v.sin()).collect();
        let v = vf(vec![f0.clone(), f1.clone()]);
        for flat in [0, 7, 333, s.len() - 1] {
            let x = s.node(flat);
            assert_eq!(v.value(&x, 0.0).unwrap(), f0[flat]);
            assert_eq!(v.value(&x, 0.5).unwrap(), f1[flat]);
        }
    }

    #[test]
    fn linear_fields_have_exact_gradients() {
        let s = spec();
        let c = [0.3, 1.25, -2.5];
        let v = vf(vec![
            linear_field(&s, c),
            linear_field(&s, [1.3, 1.25, -2.5]),
        ]);
        for x in [[0.13, 0.27], [-3.99, 0.99], [4.0, -1.0], [1.0, 0.0]] {
            let r = v.evaluate(&x, 0.2).unwrap();
            assert!((r.grad_x[0] - c[1]).abs() < 1e-12);
            assert!((r.grad_x[1] - c[2]).abs() < 1e-12);
            assert!((r.dv_dtau - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn outside_points_are_rejected() {
        let v = vf(vec![vec![0.0; spec().len()]]);
        assert!(matches!(
            v.evaluate(&[4.1, 0.0], 0.0),
            Err(ValueError::Extrapolation { axis: 0, .. })
        ));
        assert!(matches!(
            v.evaluate(&[0.0, 0.0], 0.1),
            Err(ValueError::TimeOutOfRange { .. })
        ));
    }
}
