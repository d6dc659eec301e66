//! Minimally invasive barrier filter: the closest input to the driver's
//! request satisfying the value-function decrease condition, inside the
//! input box.
//!
//! In time-to-go form the condition reads
//! `−∂V/∂τ + ∇Vᵀ(f + g u) + γV ≥ 0`, i.e. `aᵀu ≥ b` with `a = gᵀ∇V` and
//! `b = ∂V/∂τ − ∇Vᵀf − γV`.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlAffine, ControlSet, DynamicsError};
use crate::value_source::{ValueError, ValueSource};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Value(#[from] ValueError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("the filter needs a box input set")]
    UnsupportedControlSet,
    #[error("desired input has {got} components, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterOptions {
    pub gamma: f64,
    /// Include `∂V/∂τ` in the constraint offset.
    pub time_term: bool,
    /// Moves smaller than this count as pass-through.
    pub intervention_tol: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            time_term: true,
            intervention_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterProblem {
    pub u_d: Vec<f64>,
    pub a: Vec<f64>,
    pub b: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// `V` at the query point, carried for telemetry.
    pub value: f64,
}

impl FilterProblem {
    /// `aᵀu_d − b`; non-negative when the request is already safe.
    pub fn slack(&self) -> f64 {
        dot(&self.a, &self.u_d) - self.b
    }

    /// Largest `aᵀu` over the box and a maximizer closest to `u_d`.
    pub fn best_effort(&self) -> (f64, Vec<f64>) {
        let u: Vec<f64> = (0..self.a.len())
            .map(|i| {
                if self.a[i] > 0.0 {
                    self.upper[i]
                } else if self.a[i] < 0.0 {
                    self.lower[i]
                } else {
                    self.u_d[i].clamp(self.lower[i], self.upper[i])
                }
            })
            .collect();
        (dot(&self.a, &u), u)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActiveSet {
    pub halfspace: bool,
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub u_out: Vec<f64>,
    pub intervened: bool,
    /// No box input satisfies the constraint; `u_out` maximizes `aᵀu`.
    pub infeasible: bool,
    pub kkt_residual: f64,
    pub active_set: ActiveSet,
    pub value: f64,
    pub slack: f64,
    /// Seconds spent in [`filter_step`]; zero from [`solve_qp`] alone.
    pub wall_time: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn box_bounds(set: &ControlSet) -> Result<(Vec<f64>, Vec<f64>), FilterError> {
    match set {
        ControlSet::Box {
            center,
            half_widths,
        } => Ok((
            center.iter().zip(half_widths).map(|(c, h)| c - h).collect(),
            center.iter().zip(half_widths).map(|(c, h)| c + h).collect(),
        )),
        _ => Err(FilterError::UnsupportedControlSet),
    }
}

pub fn build_problem(
    source: &dyn ValueSource,
    system: &dyn ControlAffine,
    x: &[f64],
    tau: f64,
    u_d: &[f64],
    opts: &FilterOptions,
) -> Result<FilterProblem, FilterError> {
    if u_d.len() != system.control_dim() {
        return Err(FilterError::DimensionMismatch {
            expected: system.control_dim(),
            got: u_d.len(),
        });
    }
    let (lower, upper) = box_bounds(system.control_set())?;
    let sample = source.evaluate(x, tau)?;
    let xv = DVector::from_row_slice(x);
    let f = system.drift(&xv)?;
    let g = system.input_matrix(&xv)?;
    let a = g.transpose() * &sample.grad_x;
    let gamma = system.discount_index().map_or(opts.gamma, |i| x[i]);
    let mut b = -sample.grad_x.dot(&f) - gamma * sample.value;
    if opts.time_term {
        b += sample.dv_dtau;
    }
    Ok(FilterProblem {
        u_d: u_d.to_vec(),
        a: a.as_slice().to_vec(),
        b,
        lower,
        upper,
        value: sample.value,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Face {
    Free,
    Lower,
    Upper,
}

/// Exact minimizer of `‖u − u_d‖²` over `{aᵀu ≥ b} ∩ box` by enumerating
/// every combination of active box faces and halfspace activity.
pub fn solve_qp(p: &FilterProblem, intervention_tol: f64) -> FilterResult {
    let m = p.u_d.len();
    let scale = 1.0
        + p.b.abs()
        + p.a.iter().map(|v| v.abs()).sum::<f64>()
            * p.lower
                .iter()
                .chain(&p.upper)
                .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-12 * scale;
    let slack = p.slack();
    let in_box =
        |u: &[f64], t: f64| (0..m).all(|i| u[i] >= p.lower[i] - t && u[i] <= p.upper[i] + t);

    let finish = |u: Vec<f64>, infeasible: bool| {
        let (kkt, active) = kkt(p, &u, tol);
        FilterResult {
            intervened: dist2(&u, &p.u_d).sqrt() > intervention_tol,
            u_out: u,
            infeasible,
            kkt_residual: kkt,
            active_set: active,
            value: p.value,
            slack,
            wall_time: 0.0,
        }
    };

    if in_box(&p.u_d, 0.0) && slack >= 0.0 {
        return finish(p.u_d.clone(), false);
    }
    let (best, fallback) = p.best_effort();
    if best < p.b - tol {
        return finish(fallback, true);
    }

    let mut faces = vec![Face::Free; m];
    let mut best_u: Option<(f64, Vec<f64>)> = None;
    let combos = 3usize.pow(m as u32);
    for code in 0..combos {
        let mut c = code;
        for f in faces.iter_mut() {
            *f = match c % 3 {
                0 => Face::Free,
                1 => Face::Lower,
                _ => Face::Upper,
            };
            c /= 3;
        }
        let base: Vec<f64> = (0..m)
            .map(|i| match faces[i] {
                Face::Free => p.u_d[i],
                Face::Lower => p.lower[i],
                Face::Upper => p.upper[i],
            })
            .collect();
        let mut candidates = vec![base.clone()];
        let free_norm2: f64 = (0..m)
            .filter(|&i| faces[i] == Face::Free)
            .map(|i| p.a[i] * p.a[i])
            .sum();
        if free_norm2 > 0.0 {
            let lambda = (p.b - dot(&p.a, &base)) / free_norm2;
            let mut u = base;
            for i in 0..m {
                if faces[i] == Face::Free {
                    u[i] += lambda * p.a[i];
                }
            }
            candidates.push(u);
        }
        for u in candidates {
            if !in_box(&u, tol) || dot(&p.a, &u) < p.b - tol {
                continue;
            }
            let d = dist2(&u, &p.u_d);
            // strict improvement keeps the earliest (fewest active faces)
            // candidate on ties
            if best_u.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best_u = Some((d, u));
            }
        }
    }
    match best_u {
        Some((_, u)) => {
            let u: Vec<f64> = (0..m).map(|i| u[i].clamp(p.lower[i], p.upper[i])).collect();
            finish(u, false)
        }
        // only reachable through rounding at a degenerate feasible set
        None => finish(fallback, true),
    }
}

/// Largest violation of the optimality conditions at `u`, and the active
/// constraints.
fn kkt(p: &FilterProblem, u: &[f64], tol: f64) -> (f64, ActiveSet) {
    let m = u.len();
    let at_lower: Vec<usize> = (0..m).filter(|&i| u[i] <= p.lower[i] + tol).collect();
    let at_upper: Vec<usize> = (0..m)
        .filter(|&i| u[i] >= p.upper[i] - tol && !at_lower.contains(&i))
        .collect();
    let free: Vec<usize> = (0..m)
        .filter(|i| !at_lower.contains(i) && !at_upper.contains(i))
        .collect();
    let margin = dot(&p.a, u) - p.b;
    let halfspace = margin.abs() <= tol.max(1e-12 * (1.0 + p.b.abs()));

    // multiplier of the halfspace from the free coordinates
    let lambda = if halfspace {
        let n2: f64 = free.iter().map(|&i| p.a[i] * p.a[i]).sum();
        if n2 > 0.0 {
            free.iter()
                .map(|&i| (u[i] - p.u_d[i]) * p.a[i])
                .sum::<f64>()
                / n2
        } else {
            // fully pinned by the box: any non-negative multiplier works
            0.0
        }
    } else {
        0.0
    };
    let mut r: f64 = (-margin).max(0.0).max(-lambda);
    for i in 0..m {
        r = r.max(p.lower[i] - u[i]).max(u[i] - p.upper[i]);
        let g = u[i] - p.u_d[i] - lambda * p.a[i];
        let viol = if at_lower.contains(&i) {
            (-g).max(0.0)
        } else if at_upper.contains(&i) {
            g.max(0.0)
        } else {
            g.abs()
        };
        r = r.max(viol);
    }
    (
        r,
        ActiveSet {
            halfspace,
            lower: at_lower,
            upper: at_upper,
        },
    )
}

/// Build and solve the filter problem at one state, timing the whole call.
pub fn filter_step(
    source: &dyn ValueSource,
    system: &dyn ControlAffine,
    x: &[f64],
    tau: f64,
    u_d: &[f64],
    opts: &FilterOptions,
) -> Result<FilterResult, FilterError> {
    let start = Instant::now();
    let problem = build_problem(source, system, x, tau, u_d, opts)?;
    let mut result = solve_qp(&problem, opts.intervention_tol);
    result.wall_time = start.elapsed().as_secs_f64();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn problem(u_d: [f64; 2], a: [f64; 2], b: f64) -> FilterProblem {
        FilterProblem {
            u_d: u_d.to_vec(),
            a: a.to_vec(),
            b,
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
            value: 0.0,
        }
    }

    #[test]
    fn slack_constraint_passes_the_request_through() {
        let p = problem([0.3, -0.7], [1.0, 2.0], -5.0);
        let r = solve_qp(&p, 1e-9);
        assert_eq!(r.u_out, p.u_d);
        assert!(!r.intervened && !r.infeasible);
        assert_eq!(r.kkt_residual, 0.0);
    }

    #[test]
    fn single_halfspace_projection() {
        let (u_d, a, b) = ([0.1, 0.0], [0.6, 0.8], 0.5);
        let r = solve_qp(&problem(u_d, a, b), 1e-9);
        let shift = (b - (a[0] * u_d[0] + a[1] * u_d[1])) / (a[0] * a[0] + a[1] * a[1]);
        assert!((r.u_out[0] - (u_d[0] + shift * a[0])).abs() < 1e-14);
        assert!((r.u_out[1] - (u_d[1] + shift * a[1])).abs() < 1e-14);
        assert!(r.intervened && r.active_set.halfspace);
        assert!(r.kkt_residual <= 1e-9);
    }

    #[test]
    fn unreachable_halfspace_is_infeasible() {
        let r = solve_qp(&problem([0.0, 0.0], [0.0, 1.0], 2.0), 1e-9);
        assert!(r.infeasible);
        assert_eq!(r.u_out, vec![0.0, 1.0]);
    }

    #[test]
    fn box_and_halfspace_both_active() {
        // the projection onto the line leaves the box; the corner solves it
        let r = solve_qp(&problem([0.0, 0.0], [1.0, 0.2], 1.1), 1e-9);
        assert!((r.u_out[0] - 1.0).abs() < 1e-12);
        assert!((r.u_out[1] - 0.5).abs() < 1e-12);
        assert_eq!(r.active_set.upper, vec![0]);
        assert!(r.kkt_residual <= 1e-9);
    }

    #[test]
    fn out_of_box_request_is_clamped() {
        let r = solve_qp(&problem([2.0, 0.0], [0.0, 1.0], -1.0), 1e-9);
        assert_eq!(r.u_out, vec![1.0, 0.0]);
        assert!(r.intervened);
    }

    proptest! {
        #[test]
        fn positive_scaling_leaves_the_solution(
            ud in prop::array::uniform2(-1.5f64..1.5),
            a in prop::array::uniform2(-2.0f64..2.0),
            b in -2.0f64..2.0,
            lam in 0.01f64..100.0,
        ) {
            let r1 = solve_qp(&problem(ud, a, b), 1e-9);
            let r2 = solve_qp(&problem(ud, [lam * a[0], lam * a[1]], lam * b), 1e-9);
            prop_assert_eq!(r1.infeasible, r2.infeasible);
            for i in 0..2 {
                prop_assert!((r1.u_out[i] - r2.u_out[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn no_feasible_probe_is_closer(
            ud in prop::array::uniform2(-1.5f64..1.5),
            a in prop::array::uniform2(-2.0f64..2.0),
            b in -2.0f64..2.0,
            probes in prop::collection::vec(prop::array::uniform2(-1.0f64..=1.0), 200),
        ) {
            let p = problem(ud, a, b);
            let r = solve_qp(&p, 1e-9);
            prop_assume!(!r.infeasible);
            prop_assert!(r.kkt_residual <= 1e-9);
            let d = dist2(&r.u_out, &p.u_d);
            for q in probes {
                if dot(&p.a, &q) >= p.b {
                    prop_assert!(d <= dist2(&q, &p.u_d) + 1e-12);
                }
            }
        }
    }
}
