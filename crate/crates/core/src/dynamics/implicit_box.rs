//! Implicit position limits for dynamically extended inputs.
//!
//! For an extended input state `u` with rate command `u̇`, the limit
//! `|u| ≤ ū` is folded into the dynamics: the state evolves as
//! `u̇ₜ = f_u(u) + g_u(u)·u̇` where, at the limits, `f_u = ∓ū̇/2` and
//! `g_u = 1/2`, and inside `f_u = 0`, `g_u = 1`. The case functions are
//! blended with `tanh` of width `smoothing` so that `f` and `g` stay smooth.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{ControlAffine, ControlSet, DynamicsError, SafetyCorridor, StateBox};

#[derive(Debug, Clone)]
struct Channel {
    state: usize,
    rate_bound: f64,
    pos_bound: f64,
    width: f64,
}

impl Channel {
    /// (σ₊, σ₋, dσ₊/du, dσ₋/du)
    fn blend(&self, u: f64) -> (f64, f64, f64, f64) {
        let zp = (u - self.pos_bound) / self.width;
        let zm = (-self.pos_bound - u) / self.width;
        let tp = zp.tanh();
        let tm = zm.tanh();
        (
            0.5 * (1.0 + tp),
            0.5 * (1.0 + tm),
            0.5 * (1.0 - tp * tp) / self.width,
            -0.5 * (1.0 - tm * tm) / self.width,
        )
    }

    /// (f_u, g_u, f_u', g_u')
    fn terms(&self, u: f64) -> (f64, f64, f64, f64) {
        let (sp, sm, dsp, dsm) = self.blend(u);
        (
            self.rate_bound * (sm - sp),
            1.0 - sp - sm,
            self.rate_bound * (dsm - dsp),
            -dsp - dsm,
        )
    }
}

/// A system whose extended-input states respect their position limits
/// through the dynamics alone.
#[derive(Debug, Clone)]
pub struct ImplicitBoxSystem {
    base: Arc<dyn ControlAffine>,
    channels: Vec<Channel>,
    controls: ControlSet,
}

/// Wrap `system` so that each state in `which_states` (an extended input
/// driven by control column `j`) obeys the implicit box construction.
///
/// `smoothing` is the blend width as a fraction of each position bound.
pub fn extend_with_implicit_box(
    system: Arc<dyn ControlAffine>,
    which_states: &[usize],
    rate_bounds: &[f64],
    pos_bounds: &[f64],
    smoothing: f64,
) -> Result<ImplicitBoxSystem, DynamicsError> {
    let m = system.control_dim();
    let n = system.state_dim();
    if which_states.len() != m || rate_bounds.len() != m || pos_bounds.len() != m {
        return Err(DynamicsError::DimensionMismatch {
            expected: m,
            got: which_states
                .len()
                .min(rate_bounds.len())
                .min(pos_bounds.len()),
        });
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(DynamicsError::InvalidParameter(
            "smoothing must be positive".into(),
        ));
    }
    if rate_bounds
        .iter()
        .chain(pos_bounds)
        .any(|b| !(*b > 0.0 && b.is_finite()))
    {
        return Err(DynamicsError::InvalidParameter(
            "rate and position bounds must be positive".into(),
        ));
    }
    if which_states.iter().any(|&i| i >= n) {
        return Err(DynamicsError::InvalidParameter(
            "extended state index out of range".into(),
        ));
    }
    // the base input matrix must select each extended state with its own column
    let probe = DVector::from_vec(system.sampling_region().center());
    let g = system.input_matrix(&probe)?;
    for (j, &i) in which_states.iter().enumerate() {
        for k in 0..m {
            let expect = if k == j { 1.0 } else { 0.0 };
            if g[(i, k)] != expect {
                return Err(DynamicsError::InvalidParameter(format!(
                    "state {i} is not driven by control {j} alone"
                )));
            }
        }
    }
    let channels = which_states
        .iter()
        .zip(rate_bounds.iter().zip(pos_bounds))
        .map(|(&state, (&rate_bound, &pos_bound))| Channel {
            state,
            rate_bound,
            pos_bound,
            width: smoothing * pos_bound,
        })
        .collect();
    Ok(ImplicitBoxSystem {
        base: system,
        channels,
        controls: ControlSet::symmetric_box(rate_bounds.to_vec())?,
    })
}

impl ImplicitBoxSystem {
    pub fn base(&self) -> &Arc<dyn ControlAffine> {
        &self.base
    }

    /// Effective state rate of extended channel `j` for command `rate`.
    pub fn channel_rate(&self, j: usize, u: f64, rate: f64) -> f64 {
        let (f, g, _, _) = self.channels[j].terms(u);
        f + g * rate
    }
}

impl ControlAffine for ImplicitBoxSystem {
    fn name(&self) -> String {
        format!("implicit_box[{}]", self.base.name())
    }

    fn state_dim(&self) -> usize {
        self.base.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.base.control_dim()
    }

    fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        let mut f = self.base.drift(x)?;
        for c in &self.channels {
            f[c.state] += c.terms(x[c.state]).0;
        }
        Ok(f)
    }

    fn input_matrix(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        let mut g = self.base.input_matrix(x)?;
        for c in &self.channels {
            let gu = c.terms(x[c.state]).1;
            let mut row = g.row_mut(c.state);
            row *= gu;
        }
        Ok(g)
    }

    fn drift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        let mut j = self.base.drift_jacobian(x)?;
        for c in &self.channels {
            j[(c.state, c.state)] += c.terms(x[c.state]).2;
        }
        Ok(j)
    }

    fn input_jacobian(&self, x: &DVector<f64>) -> Result<Vec<DMatrix<f64>>, DynamicsError> {
        let base_g = self.base.input_matrix(x)?;
        let mut dg = self.base.input_jacobian(x)?;
        for c in &self.channels {
            let (_, gu, _, dgu) = c.terms(x[c.state]);
            for (k, m) in dg.iter_mut().enumerate() {
                let mut row = m.row_mut(c.state);
                row *= gu;
                if k == c.state {
                    row += base_g.row(c.state) * dgu;
                }
            }
        }
        Ok(dg)
    }

    fn control_set(&self) -> &ControlSet {
        &self.controls
    }

    fn constraint(&self, x: &DVector<f64>) -> f64 {
        self.base.constraint(x)
    }

    fn constraint_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.base.constraint_gradient(x)
    }

    fn sampling_region(&self) -> &StateBox {
        self.base.sampling_region()
    }

    fn safety_corridor(&self) -> Option<SafetyCorridor> {
        self.base.safety_corridor()
    }

    fn discount_index(&self) -> Option<usize> {
        self.base.discount_index()
    }
}
