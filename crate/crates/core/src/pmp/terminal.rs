//! Boundary point identification: find `x_T` with `h(x_T) = 0` and a
//! tangent optimal velocity, `∇h(x_T)ᵀ(f(x_T) + g(x_T)u_T) = 0`, where `u_T`
//! maximizes `∇h(x_T)ᵀg(x_T)u`. The costate is eliminated by `p_T := ∇h(x_T)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::maximizer::closed_form_maximizer;
use super::PmpError;
use crate::dynamics::ControlAffine;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepRule {
    /// Armijo backtracking starting from a unit step.
    Backtracking {
        shrink: f64,
        armijo: f64,
    },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalOptions {
    pub max_iterations: usize,
    pub step: StepRule,
    /// Scale the gradient by the diagonal of `JᵀJ` (Jacobi preconditioning).
    pub preconditioned: bool,
    pub h_tol: f64,
    pub p_tol: f64,
    pub tangency_tol: f64,
    /// Central-difference step for the residual Jacobian.
    pub fd_step: f64,
}

impl Default for TerminalOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            step: StepRule::Backtracking {
                shrink: 0.5,
                armijo: 1e-4,
            },
            preconditioned: true,
            h_tol: 1e-8,
            p_tol: 1e-8,
            tangency_tol: 1e-8,
            fd_step: 1e-7,
        }
    }
}

impl TerminalOptions {
    /// Looser tolerances for the full vehicle model.
    pub fn vehicle() -> Self {
        Self {
            h_tol: 1e-6,
            p_tol: 1e-6,
            tangency_tol: 1e-6,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalResiduals {
    pub h: f64,
    pub p: f64,
    pub tangency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub residuals: TerminalResiduals,
    pub x_t: Vec<f64>,
    pub p_t: Vec<f64>,
}

/// Residuals of the three terminal conditions at `x` with `p := ∇h(x)`.
pub fn terminal_residuals(
    system: &dyn ControlAffine,
    x: &DVector<f64>,
) -> Result<TerminalResiduals, PmpError> {
    let p = system.constraint_gradient(x);
    let f = system.drift(x)?;
    let g = system.input_matrix(x)?;
    let v = g.transpose() * &p;
    let u = closed_form_maximizer(v.as_slice(), system.control_set())?;
    let tangency = p.dot(&(f + g * u));
    Ok(TerminalResiduals {
        h: system.constraint(x),
        p: (&p - system.constraint_gradient(x)).norm(),
        tangency,
    })
}

fn residual_vector(system: &dyn ControlAffine, x: &DVector<f64>) -> Result<[f64; 2], PmpError> {
    let r = terminal_residuals(system, x)?;
    Ok([r.h, r.tangency])
}

fn residual_jacobian(
    system: &dyn ControlAffine,
    x: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>, PmpError> {
    let n = x.len();
    let mut j = DMatrix::zeros(2, n);
    for k in 0..n {
        let h = step * (1.0 + x[k].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let rp = residual_vector(system, &xp)?;
        let rm = residual_vector(system, &xm)?;
        j[(0, k)] = (rp[0] - rm[0]) / (2.0 * h);
        j[(1, k)] = (rp[1] - rm[1]) / (2.0 * h);
    }
    Ok(j)
}

fn half_sq(r: &[f64; 2]) -> f64 {
    0.5 * (r[0] * r[0] + r[1] * r[1])
}

/// Gradient descent on `½‖(h, tangency)‖²` from `x_init`.
///
/// Non-convergence is reported through `converged = false`; dynamics
/// domain errors along the way abort the solve.
pub fn solve_terminal_conditions(
    system: &dyn ControlAffine,
    x_init: &DVector<f64>,
    opts: &TerminalOptions,
) -> Result<TerminalSolveReport, PmpError> {
    let mut x = x_init.clone();
    let mut iterations = 0;
    let done = |r: &TerminalResiduals| {
        r.h.abs() <= opts.h_tol && r.p <= opts.p_tol && r.tangency.abs() <= opts.tangency_tol
    };
    let mut res = terminal_residuals(system, &x)?;
    while !done(&res) && iterations < opts.max_iterations {
        iterations += 1;
        let r = [res.h, res.tangency];
        let j = residual_jacobian(system, &x, opts.fd_step)?;
        let grad = j.transpose() * DVector::from_row_slice(&r);
        let mut dir = -grad.clone();
        if opts.preconditioned {
            let jtj = j.transpose() * &j;
            for k in 0..dir.len() {
                dir[k] /= jtj[(k, k)] + 1e-12;
            }
        }
        let phi = half_sq(&r);
        let slope = grad.dot(&dir);
        let next = match opts.step {
            StepRule::Fixed(t) => &x + &dir * t,
            StepRule::Backtracking { shrink, armijo } => {
                let mut t = 1.0;
                loop {
                    let cand = &x + &dir * t;
                    let accept = match residual_vector(system, &cand) {
                        Ok(rc) => half_sq(&rc) <= phi + armijo * t * slope,
                        Err(_) => false,
                    };
                    if accept || t < 1e-12 {
                        break cand;
                    }
                    t *= shrink;
                }
            }
        };
        x = next;
        res = terminal_residuals(system, &x)?;
    }
    let p_t = system.constraint_gradient(&x);
    Ok(TerminalSolveReport {
        converged: done(&res),
        iterations,
        residuals: res,
        x_t: x.as_slice().to_vec(),
        p_t: p_t.as_slice().to_vec(),
    })
}
