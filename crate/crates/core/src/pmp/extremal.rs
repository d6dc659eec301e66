use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::maximizer::{closed_form_maximizer, hamiltonian, SINGULAR_TOL};
use super::PmpError;
use crate::dynamics::{ControlAffine, ControlSet};

/// A boundary trajectory in time-to-go. Index 0 is the earliest time
/// (largest `τ`); the last node is the touch point at `τ = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extremal {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub costates: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// Cost multiplier; zero for every trajectory produced here.
    pub p0: f64,
    pub hamiltonian_trace: Vec<f64>,
    /// Integration stopped early because the state left the sampling region.
    pub truncated: bool,
}

impl Extremal {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn max_abs_hamiltonian(&self) -> f64 {
        self.hamiltonian_trace
            .iter()
            .fold(0.0, |m, h| m.max(h.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremalOptions {
    pub dt: f64,
    /// `None` selects [`default_ham_tol`].
    pub ham_tol: Option<f64>,
    pub truncate_outside_region: bool,
}

impl Default for ExtremalOptions {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            ham_tol: None,
            truncate_outside_region: true,
        }
    }
}

/// `1e-6 · (1 + ‖p_T‖·‖f(x_T)‖)`.
pub fn default_ham_tol(
    system: &dyn ControlAffine,
    x_t: &DVector<f64>,
    p_t: &DVector<f64>,
) -> Result<f64, PmpError> {
    Ok(1e-6 * (1.0 + p_t.norm() * system.drift(x_t)?.norm()))
}

struct Stage {
    u: DVector<f64>,
    dx: DVector<f64>,
    dp: DVector<f64>,
}

/// Derivatives of `(x, p)` with respect to time-to-go for a given input.
fn flow(
    system: &dyn ControlAffine,
    x: &DVector<f64>,
    p: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), PmpError> {
    let f = system.drift(x)?;
    let g = system.input_matrix(x)?;
    let mut jac = system.drift_jacobian(x)?;
    for (k, dg) in system.input_jacobian(x)?.iter().enumerate() {
        let col = dg * u;
        let mut c = jac.column_mut(k);
        c += col;
    }
    Ok((-(f + g * u), jac.transpose() * p))
}

/// `d(gᵀp)/dτ` along the flow generated by `u`.
fn switching_rate(
    system: &dyn ControlAffine,
    x: &DVector<f64>,
    p: &DVector<f64>,
    g: &DMatrix<f64>,
    dx: &DVector<f64>,
    dp: &DVector<f64>,
) -> Result<DVector<f64>, PmpError> {
    let mut rate = g.transpose() * dp;
    for (k, dg) in system.input_jacobian(x)?.iter().enumerate() {
        if dx[k] != 0.0 {
            rate += dg.transpose() * p * dx[k];
        }
    }
    Ok(rate)
}

/// Maximizing input at `(x, p)`. Where a switching component is exactly
/// zero (the touch point itself), the sign it takes just after, in
/// time-to-go, is used instead so RK4 stages see the arc they approximate.
fn stage(
    system: &dyn ControlAffine,
    x: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<Stage, PmpError> {
    let g = system.input_matrix(x)?;
    let mut v = g.transpose() * p;
    let set = system.control_set();
    let scale = 1.0 + p.norm() * g.amax();
    let tie = 1e-12 * scale;
    let needs_lookahead = match set {
        ControlSet::Box { .. } => v.iter().any(|vj| vj.abs() <= tie),
        ControlSet::Ball { .. } => v.norm() <= SINGULAR_TOL.max(tie),
    };
    if needs_lookahead {
        let provisional = match set {
            ControlSet::Box { .. } => closed_form_maximizer(v.as_slice(), set)?,
            ControlSet::Ball { center, .. } => DVector::from_column_slice(center),
        };
        let (dx, dp) = flow(system, x, p, &provisional)?;
        let rate = switching_rate(system, x, p, &g, &dx, &dp)?;
        match set {
            ControlSet::Box { .. } => {
                for j in 0..v.len() {
                    if v[j].abs() <= tie {
                        v[j] = if rate[j].abs() <= tie { 0.0 } else { rate[j] };
                    }
                }
            }
            ControlSet::Ball { .. } => v = rate,
        }
    }
    let u = closed_form_maximizer(v.as_slice(), set)?;
    let (dx, dp) = flow(system, x, p, &u)?;
    Ok(Stage { u, dx, dp })
}

/// Integrate the state–costate system backward from the touch point
/// `(x_T, p_T)` for `horizon` seconds with the default options.
pub fn integrate_extremal_backward(
    system: &dyn ControlAffine,
    x_t: &DVector<f64>,
    p_t: &DVector<f64>,
    horizon: f64,
    dt: f64,
) -> Result<Extremal, PmpError> {
    integrate_extremal_backward_with(
        system,
        x_t,
        p_t,
        horizon,
        &ExtremalOptions {
            dt,
            ..ExtremalOptions::default()
        },
    )
}

pub fn integrate_extremal_backward_with(
    system: &dyn ControlAffine,
    x_t: &DVector<f64>,
    p_t: &DVector<f64>,
    horizon: f64,
    opts: &ExtremalOptions,
) -> Result<Extremal, PmpError> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(PmpError::Config(format!(
            "horizon must be >= 0, got {horizon}"
        )));
    }
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(PmpError::Config(format!("dt must be > 0, got {}", opts.dt)));
    }
    let tol = match opts.ham_tol {
        Some(t) => t,
        None => default_ham_tol(system, x_t, p_t)?,
    };
    let region = system.sampling_region();

    let mut times = vec![0.0];
    let mut states = vec![x_t.clone()];
    let mut costates = vec![p_t.clone()];
    let mut controls = Vec::new();
    let mut trace = Vec::new();
    let mut truncated = false;

    let steps = (horizon / opts.dt - 1e-9).ceil().max(0.0) as usize;
    let (mut x, mut p) = (x_t.clone(), p_t.clone());
    for k in 0..=steps {
        let s1 = stage(system, &x, &p)?;
        let h_val = hamiltonian(system, &x, &p)?;
        if h_val.abs() > tol {
            return Err(PmpError::IntegrationDrift {
                step: k,
                value: h_val,
                tol,
            });
        }
        controls.push(s1.u.clone());
        trace.push(h_val);
        if k == steps {
            break;
        }
        let tau = times[k];
        let next_tau = ((k + 1) as f64 * opts.dt).min(horizon);
        let dt = next_tau - tau;
        let s2 = stage(
            system,
            &(&x + &s1.dx * (0.5 * dt)),
            &(&p + &s1.dp * (0.5 * dt)),
        )?;
        let s3 = stage(
            system,
            &(&x + &s2.dx * (0.5 * dt)),
            &(&p + &s2.dp * (0.5 * dt)),
        )?;
        let s4 = stage(system, &(&x + &s3.dx * dt), &(&p + &s3.dp * dt))?;
        let xn = &x + (&s1.dx + &s2.dx * 2.0 + &s3.dx * 2.0 + &s4.dx) * (dt / 6.0);
        let pn = &p + (&s1.dp + &s2.dp * 2.0 + &s3.dp * 2.0 + &s4.dp) * (dt / 6.0);
        if opts.truncate_outside_region && !region.contains(xn.as_slice()) {
            truncated = true;
            break;
        }
        x = xn;
        p = pn;
        times.push(next_tau);
        states.push(x.clone());
        costates.push(p.clone());
    }

    let to_vecs = |v: Vec<DVector<f64>>| -> Vec<Vec<f64>> {
        v.into_iter().rev().map(|d| d.as_slice().to_vec()).collect()
    };
    times.reverse();
    trace.reverse();
    Ok(Extremal {
        times,
        states: to_vecs(states),
        costates: to_vecs(costates),
        controls: to_vecs(controls),
        p0: 0.0,
        hamiltonian_trace: trace,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{kinematic_corridor_model, CorridorModel, TrackGeometry};
    use crate::pmp::support;

    fn corridor() -> CorridorModel {
        kinematic_corridor_model(10.0, 1.0 / 12.0, &TrackGeometry::default()).unwrap()
    }

    fn touch() -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_vec(vec![3.0, 0.0]),
            DVector::from_vec(vec![-1.0, 0.0]),
        )
    }

    #[test]
    fn hamiltonian_vanishes_along_corridor_extremal() {
        let (x, p) = touch();
        let ext = integrate_extremal_backward(&corridor(), &x, &p, 1.0, 1e-3).unwrap();
        assert!(!ext.truncated);
        assert_eq!(ext.len(), 1001);
        assert!(
            ext.max_abs_hamiltonian() <= 1e-8,
            "{}",
            ext.max_abs_hamiltonian()
        );
        assert_eq!(ext.times[0], 1.0);
        assert_eq!(*ext.times.last().unwrap(), 0.0);
        assert!(ext.times.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn first_backward_step_enters_the_safe_set() {
        let (x, p) = touch();
        let sys = corridor();
        let ext = integrate_extremal_backward(&sys, &x, &p, 1e-3, 1e-3).unwrap();
        let before = DVector::from_row_slice(&ext.states[0]);
        assert!(sys.constraint(&before) > 0.0);
    }

    #[test]
    fn zero_horizon_is_the_touch_point() {
        let (x, p) = touch();
        let ext = integrate_extremal_backward(&corridor(), &x, &p, 0.0, 1e-3).unwrap();
        assert_eq!(ext.len(), 1);
        assert_eq!(ext.states[0], vec![3.0, 0.0]);
        assert_eq!(ext.controls.len(), 1);
    }

    #[test]
    fn stored_controls_maximize_the_switching_function() {
        let (x, p) = touch();
        let sys = corridor();
        let ext = integrate_extremal_backward(&sys, &x, &p, 0.5, 1e-3).unwrap();
        for k in 0..ext.len() {
            let xk = DVector::from_row_slice(&ext.states[k]);
            let pk = DVector::from_row_slice(&ext.costates[k]);
            let v = sys.input_matrix(&xk).unwrap().transpose() * &pk;
            let got: f64 = v.iter().zip(&ext.controls[k]).map(|(a, b)| a * b).sum();
            assert!((got - support(v.as_slice(), sys.control_set())).abs() <= 1e-12);
        }
        // away from the touch point the input is saturated toward the center
        assert_eq!(ext.controls[0], vec![-1.0 / 12.0]);
    }

    #[test]
    fn costates_converge_at_fourth_order() {
        let (x, p) = touch();
        let sys = corridor();
        let coarse = integrate_extremal_backward(&sys, &x, &p, 0.6, 0.02).unwrap();
        let fine = integrate_extremal_backward(&sys, &x, &p, 0.6, 0.01).unwrap();
        let finer = integrate_extremal_backward(&sys, &x, &p, 0.6, 0.005).unwrap();
        let err = |a: &Extremal, b: &Extremal| {
            let (xa, xb) = (&a.costates[0], &b.costates[0]);
            let (sa, sb) = (&a.states[0], &b.states[0]);
            xa.iter()
                .zip(xb)
                .chain(sa.iter().zip(sb))
                .map(|(u, v)| (u - v).abs())
                .fold(0.0, f64::max)
        };
        let e1 = err(&coarse, &finer);
        let e2 = err(&fine, &finer);
        assert!(e1 < 1e-6 && e2 < e1 / 8.0, "{e1:e} {e2:e}");
    }

    #[test]
    fn leaving_the_region_truncates() {
        let (x, p) = touch();
        let sys = corridor()
            .with_sampling_region(
                crate::dynamics::StateBox::new(vec![-3.5, -0.3], vec![3.5, 0.3]).unwrap(),
            )
            .unwrap();
        let ext = integrate_extremal_backward(&sys, &x, &p, 1.0, 1e-3).unwrap();
        assert!(ext.truncated);
        assert!(ext.times[0] < 1.0);
        for s in &ext.states {
            assert!(sys.sampling_region().contains(s));
        }
    }

    #[test]
    fn coarse_step_reports_drift() {
        let (x, p) = touch();
        let opts = ExtremalOptions {
            dt: 0.5,
            ham_tol: Some(1e-14),
            truncate_outside_region: false,
        };
        let res = integrate_extremal_backward_with(&corridor(), &x, &p, 3.0, &opts);
        assert!(matches!(res, Err(PmpError::IntegrationDrift { .. })));
    }
}
