use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{GridError, GridSpec, GridValueFunction, MAX_DIM};
use crate::dynamics::{ControlAffine, ControlSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbvfOptions {
    pub gamma: f64,
    pub horizon: f64,
    /// Courant number in `(0, 1]`.
    pub cfl: f64,
    /// Spacing of stored slices; the march itself takes smaller CFL steps.
    pub slice_dt: f64,
}

impl CbvfOptions {
    pub fn new(gamma: f64, horizon: f64) -> Self {
        Self {
            gamma,
            horizon,
            cfl: 0.9,
            slice_dt: 0.02,
        }
    }
}

/// Solve with the default slice spacing.
pub fn solve_cbvf(
    system: &dyn ControlAffine,
    spec: &GridSpec,
    gamma: f64,
    horizon: f64,
    cfl: f64,
) -> Result<GridValueFunction, GridError> {
    solve_cbvf_with(
        system,
        spec,
        &CbvfOptions {
            cfl,
            ..CbvfOptions::new(gamma, horizon)
        },
    )
}

/// Dynamics sampled at every node, so the march never calls back into the
/// model.
struct NodeDynamics {
    n: usize,
    m: usize,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl NodeDynamics {
    fn sample(system: &dyn ControlAffine, spec: &GridSpec) -> Result<Self, GridError> {
        let (n, m) = (system.state_dim(), system.control_dim());
        let mut f = Vec::with_capacity(spec.len() * n);
        let mut g = Vec::with_capacity(spec.len() * n * m);
        for flat in 0..spec.len() {
            let x = DVector::from_vec(spec.node(flat));
            f.extend(system.drift(&x)?.iter());
            let gx = system.input_matrix(&x)?;
            for i in 0..n {
                for j in 0..m {
                    g.push(gx[(i, j)]);
                }
            }
        }
        Ok(Self { n, m, f, g })
    }

    /// `max_u pᵀ(f + g u)` at node `k`.
    fn hamiltonian(&self, k: usize, p: &[f64], set: &ControlSet, v: &mut [f64]) -> f64 {
        let (n, m) = (self.n, self.m);
        let f = &self.f[k * n..(k + 1) * n];
        let g = &self.g[k * n * m..(k + 1) * n * m];
        let mut h = 0.0;
        for i in 0..n {
            h += p[i] * f[i];
        }
        for j in 0..m {
            v[j] = (0..n).map(|i| g[i * m + j] * p[i]).sum();
        }
        h + match set {
            ControlSet::Box {
                center,
                half_widths,
            } => (0..m)
                .map(|j| v[j] * center[j] + v[j].abs() * half_widths[j])
                .sum::<f64>(),
            ControlSet::Ball { center, radius } => {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().zip(center).map(|(a, c)| a * c).sum::<f64>() + radius * norm
            }
        }
    }

    /// Per-axis bound on `|∂H/∂p_i|` over the whole grid.
    fn dissipation(&self, set: &ControlSet) -> Vec<f64> {
        let (n, m) = (self.n, self.m);
        let nodes = self.f.len() / n;
        let mut alpha = vec![0.0f64; n];
        for k in 0..nodes {
            let f = &self.f[k * n..(k + 1) * n];
            let g = &self.g[k * n * m..(k + 1) * n * m];
            for i in 0..n {
                let row = &g[i * m..(i + 1) * m];
                let reach = match set {
                    ControlSet::Box {
                        center,
                        half_widths,
                    } => row
                        .iter()
                        .zip(center.iter().zip(half_widths))
                        .map(|(gij, (c, w))| (gij * c).abs() + gij.abs() * w)
                        .sum::<f64>(),
                    ControlSet::Ball { center, radius } => {
                        let c: f64 = row.iter().zip(center).map(|(a, b)| a * b).sum();
                        c.abs() + radius * row.iter().map(|x| x * x).sum::<f64>().sqrt()
                    }
                };
                alpha[i] = alpha[i].max(f[i].abs() + reach);
            }
        }
        alpha
    }
}

/// March `V^{k+1} = min(ℓ, V^k + Δτ (H_LF + γV^k))` from `V^0 = ℓ`.
///
/// The Lax–Friedrichs Hamiltonian adds `Σ α_i (D⁺_i − D⁻_i)/2` to `H` at
/// the averaged gradient. Grid edges use zero-gradient ghost nodes so the
/// scheme stays monotone up to the boundary.
pub fn solve_cbvf_with(
    system: &dyn ControlAffine,
    spec: &GridSpec,
    opts: &CbvfOptions,
) -> Result<GridValueFunction, GridError> {
    let n = system.state_dim();
    if n > MAX_DIM {
        return Err(GridError::Config(format!(
            "state dimension {n} exceeds the grid limit {MAX_DIM}"
        )));
    }
    if spec.dim() != n {
        return Err(GridError::Config(format!(
            "grid has {} axes for a {n}-state system",
            spec.dim()
        )));
    }
    if !(opts.cfl > 0.0 && opts.cfl <= 1.0) {
        return Err(GridError::Config(format!("cfl {} not in (0, 1]", opts.cfl)));
    }
    if !(opts.gamma >= 0.0 && opts.gamma.is_finite()) {
        return Err(GridError::Config("gamma must be >= 0".into()));
    }
    if !(opts.horizon >= 0.0 && opts.horizon.is_finite()) || !(opts.slice_dt > 0.0) {
        return Err(GridError::Config(
            "horizon must be >= 0 and slice_dt > 0".into(),
        ));
    }
    if !spec.bounds().contains_box(system.sampling_region()) {
        return Err(GridError::Config(
            "grid does not cover the system's sampling region".into(),
        ));
    }

    let dynamics = NodeDynamics::sample(system, spec)?;
    let set = system.control_set().clone();
    let alpha = dynamics.dissipation(&set);
    let dx = spec.spacings();
    let rate: f64 = alpha.iter().zip(&dx).map(|(a, h)| a / h).sum::<f64>() + opts.gamma;
    let max_step = if rate > 0.0 {
        opts.cfl / rate
    } else {
        f64::INFINITY
    };

    let n_slices = ((opts.horizon / opts.slice_dt) - 1e-9).ceil().max(0.0) as usize;
    let slice_dt = if n_slices == 0 {
        opts.slice_dt
    } else {
        opts.horizon / n_slices as f64
    };
    let substeps = (slice_dt / max_step).ceil().max(1.0) as usize;
    let dtau = slice_dt / substeps as f64;

    let ell: Vec<f64> = (0..spec.len())
        .map(|k| system.constraint(&DVector::from_vec(spec.node(k))))
        .collect();
    let strides = spec.strides();
    let counts: Vec<usize> = spec.axes.iter().map(|a| a.count).collect();

    let mut slices = Vec::with_capacity(n_slices + 1);
    slices.push(ell.clone());
    let mut cur = ell.clone();
    let mut next = vec![0.0; cur.len()];
    let mut p = [0.0; MAX_DIM];
    let mut diss = [0.0; MAX_DIM];
    let mut v = vec![0.0; system.control_dim()];
    let mut idx = [0usize; MAX_DIM];
    let mut step = 0;

    for _ in 0..n_slices {
        for _ in 0..substeps {
            step += 1;
            idx[..n].fill(0);
            for k in 0..cur.len() {
                let vk = cur[k];
                for d in 0..n {
                    let s = strides[d];
                    let up = if idx[d] + 1 < counts[d] {
                        cur[k + s]
                    } else {
                        vk
                    };
                    let down = if idx[d] > 0 { cur[k - s] } else { vk };
                    let dp = (up - vk) / dx[d];
                    let dm = (vk - down) / dx[d];
                    p[d] = 0.5 * (dp + dm);
                    diss[d] = 0.5 * alpha[d] * (dp - dm);
                }
                let h =
                    dynamics.hamiltonian(k, &p[..n], &set, &mut v) + diss[..n].iter().sum::<f64>();
                let updated = vk + dtau * (h + opts.gamma * vk);
                next[k] = updated.min(ell[k]);

                for d in (0..n).rev() {
                    idx[d] += 1;
                    if idx[d] < counts[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            if next.iter().any(|x| !x.is_finite()) {
                return Err(GridError::NumericalBlowup { step });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        slices.push(cur.clone());
    }

    Ok(GridValueFunction {
        spec: spec.clone(),
        slices,
        gamma: opts.gamma,
        dt: slice_dt,
        system_id: system.name(),
    })
}
