//! Neural barrier value function `V(x, τ) = ℓ(x) + τ·Π(x, τ)`.
//!
//! `Π` is a small fully connected network on normalized inputs. Input
//! derivatives are propagated forward as tangents alongside the values, and
//! the training loss (which depends on those derivatives) is differentiated
//! with respect to the weights by a hand-written reverse pass through both.

mod io;
mod train;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlAffine, DynamicsError, SafetyCorridor, StateBox};
use crate::pmp::support;
use crate::value_source::{check_tau, ValueError, ValueSample, ValueSource};

pub use io::{load_model, save_model, Architecture, ModelFile, Provenance, MODEL_SCHEMA_VERSION};
pub use train::{
    mean_residual, residual_gradient, train, EpochSchedule, LrSchedule, SamplingStrategy,
    TrainConfig, TrainReport,
};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: residual {residual:e}")]
    TrainingDiverged { epoch: usize, residual: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Pmp(#[from] crate::pmp::PmpError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("unsupported model schema_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    /// `sin(ω₀ a)` with the matching uniform initialization.
    Sine {
        omega0: f64,
    },
    Tanh,
}

impl Activation {
    /// (σ, σ', σ'')
    #[inline]
    fn eval(self, a: f64) -> (f64, f64, f64) {
        match self {
            Activation::Sine { omega0 } => {
                let (s, c) = (omega0 * a).sin_cos();
                (s, omega0 * c, -omega0 * omega0 * s)
            }
            Activation::Tanh => {
                let t = a.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
        }
    }
}

/// Affine input scaling: states to `[-1, 1]` over a box, `τ` to `[-1, 1]`
/// over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Vec<f64>,
    pub half_extent: Vec<f64>,
    pub horizon: f64,
}

impl Normalization {
    pub fn from_box(region: &StateBox, horizon: f64) -> Self {
        Self {
            center: region.center(),
            half_extent: region.half_extent(),
            horizon,
        }
    }

    /// `dz_i/dx_i`, with the time input last.
    fn scales(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.half_extent.iter().map(|h| 1.0 / h).collect();
        s.push(2.0 / self.horizon);
        s
    }

    fn input(&self, x: &[f64], tau: f64, out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.center[i]) / self.half_extent[i];
        }
        out[x.len()] = 2.0 * tau / self.horizon - 1.0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub norm: Normalization,
    /// `ℓ(x)`; only corridor constraints are representable in a model file.
    pub constraint: SafetyCorridor,
}

/// Values and input tangents of `Π` for a batch (columns are samples).
pub(crate) struct Tape {
    /// `h[0]` is the normalized input; `h[l]` the output of hidden layer `l`.
    h: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers.
    a: Vec<DMatrix<f64>>,
    /// `hdot[l][k]`: derivative of `h[l]` along input `k`.
    hdot: Vec<Vec<DMatrix<f64>>>,
    adot: Vec<Vec<DMatrix<f64>>>,
    pub(crate) pi: DVector<f64>,
    /// `pidot[(k, s)] = ∂Π/∂z_k` for sample `s`.
    pub(crate) pidot: DMatrix<f64>,
}

/// Parameter gradients with the same shapes as the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl ValueNet {
    /// Randomly initialized network. `hidden` lists the hidden widths.
    pub fn new(
        state_dim: usize,
        hidden: &[usize],
        activation: Activation,
        norm: Normalization,
        constraint: SafetyCorridor,
        seed: u64,
    ) -> Result<Self, NetError> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(NetError::Config(
                "need at least one non-empty hidden layer".into(),
            ));
        }
        if norm.center.len() != state_dim || norm.half_extent.len() != state_dim {
            return Err(NetError::Config(
                "normalization does not match state dimension".into(),
            ));
        }
        if norm.half_extent.iter().any(|h| !(*h > 0.0)) || !(norm.horizon > 0.0) {
            return Err(NetError::Config(
                "normalization scales must be positive".into(),
            ));
        }
        if constraint.axis >= state_dim {
            return Err(NetError::Config("constraint axis out of range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![state_dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = match activation {
                Activation::Sine { .. } if l == 0 => 1.0 / fan_in as f64,
                Activation::Sine { omega0 } => (6.0 / fan_in as f64).sqrt() / omega0,
                Activation::Tanh => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..=bound));
            let b = DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..=bound));
            layers.push(Layer { w, b });
        }
        Ok(Self {
            layers,
            activation,
            norm,
            constraint,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.norm.center.len()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.b.len())
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn ell(&self, x: &[f64]) -> f64 {
        self.constraint.margin(x)
    }

    /// All parameters in a fixed order (each weight matrix column-major,
    /// then its bias).
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.parameter_count() {
            return Err(NetError::Config(format!(
                "{} parameters for a network with {}",
                params.len(),
                self.parameter_count()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// FNV-1a over the little-endian parameter bytes.
    pub fn checksum(&self) -> u64 {
        self.parameters()
            .iter()
            .flat_map(|p| p.to_le_bytes())
            .fold(0xcbf29ce484222325, |h, b| {
                (h ^ b as u64).wrapping_mul(0x100000001b3)
            })
    }

    /// Forward pass over the batch with input tangents.
    pub(crate) fn tape(&self, xs: &[&[f64]], taus: &[f64]) -> Tape {
        let d0 = self.state_dim() + 1;
        let batch = xs.len();
        let mut z = DMatrix::zeros(d0, batch);
        let mut buf = vec![0.0; d0];
        for (s, (x, &tau)) in xs.iter().zip(taus).enumerate() {
            self.norm.input(x, tau, &mut buf);
            z.column_mut(s).copy_from_slice(&buf);
        }
        let hidden = self.layers.len() - 1;
        let mut h = Vec::with_capacity(hidden + 1);
        let mut a = Vec::with_capacity(hidden);
        let mut hdot = Vec::with_capacity(hidden + 1);
        let mut adot = Vec::with_capacity(hidden);
        h.push(z);
        // the input tangent along k is the unit vector e_k in every column
        hdot.push(
            (0..d0)
                .map(|k| DMatrix::from_fn(d0, batch, |r, _| if r == k { 1.0 } else { 0.0 }))
                .collect::<Vec<_>>(),
        );
        for l in 0..hidden {
            let layer = &self.layers[l];
            let mut al = &layer.w * &h[l];
            for mut col in al.column_iter_mut() {
                col += &layer.b;
            }
            let adl: Vec<DMatrix<f64>> = hdot[l].iter().map(|t| &layer.w * t).collect();
            let mut hl = al.clone();
            let mut dsig = al.clone();
            for (v, d) in hl.iter_mut().zip(dsig.iter_mut()) {
                let (s, ds, _) = self.activation.eval(*v);
                *v = s;
                *d = ds;
            }
            let hdl: Vec<DMatrix<f64>> = adl.iter().map(|t| t.component_mul(&dsig)).collect();
            a.push(al);
            h.push(hl);
            adot.push(adl);
            hdot.push(hdl);
        }
        let out = &self.layers[hidden];
        let pi = (&out.w * &h[hidden])
            .row(0)
            .transpose()
            .add_scalar(out.b[0]);
        let mut pidot = DMatrix::zeros(d0, batch);
        for k in 0..d0 {
            let r = &out.w * &hdot[hidden][k];
            pidot.row_mut(k).copy_from(&r.row(0));
        }
        Tape {
            h,
            a,
            hdot,
            adot,
            pi,
            pidot,
        }
    }

    /// Reverse pass for a loss with cotangents `c_pi[s] = ∂L/∂Π_s` and
    /// `c_pidot[(k, s)] = ∂L/∂(∂Π_s/∂z_k)`.
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        c_pi: &DVector<f64>,
        c_pidot: &DMatrix<f64>,
    ) -> Gradients {
        let hidden = self.layers.len() - 1;
        let d0 = self.state_dim() + 1;
        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer {
                w: DMatrix::zeros(l.w.nrows(), l.w.ncols()),
                b: DVector::zeros(l.b.len()),
            })
            .collect();

        let out = &self.layers[hidden];
        let c_pi_row = DMatrix::from_row_slice(1, c_pi.len(), c_pi.as_slice());
        let mut gw = &c_pi_row * tape.h[hidden].transpose();
        for k in 0..d0 {
            gw += c_pidot.row(k) * tape.hdot[hidden][k].transpose();
        }
        grads[hidden].w = gw;
        grads[hidden].b[0] = c_pi.sum();

        // adjoints of h[l] and of its tangents
        let wt = out.w.transpose();
        let mut hbar = &wt * &c_pi_row;
        let mut hdbar: Vec<DMatrix<f64>> = (0..d0).map(|k| &wt * c_pidot.row(k)).collect();

        for l in (0..hidden).rev() {
            let al = &tape.a[l];
            let (rows, cols) = al.shape();
            let mut abar = DMatrix::zeros(rows, cols);
            let mut adbar: Vec<DMatrix<f64>> = vec![DMatrix::zeros(rows, cols); d0];
            for s in 0..cols {
                for r in 0..rows {
                    let (_, d1, d2) = self.activation.eval(al[(r, s)]);
                    let mut acc = hbar[(r, s)] * d1;
                    for k in 0..d0 {
                        acc += hdbar[k][(r, s)] * d2 * tape.adot[l][k][(r, s)];
                        adbar[k][(r, s)] = hdbar[k][(r, s)] * d1;
                    }
                    abar[(r, s)] = acc;
                }
            }
            let layer = &self.layers[l];
            let mut gw = &abar * tape.h[l].transpose();
            for k in 0..d0 {
                gw += &adbar[k] * tape.hdot[l][k].transpose();
            }
            grads[l].w = gw;
            grads[l].b = abar.column_sum();
            if l > 0 {
                let wt = layer.w.transpose();
                hbar = &wt * &abar;
                hdbar = adbar.iter().map(|m| &wt * m).collect();
            }
        }
        Gradients { layers: grads }
    }

    /// `(V, ∇ₓV, ∂V/∂τ)` for a batch.
    pub fn forward_batch(&self, xs: &[&[f64]], taus: &[f64]) -> Vec<ValueSample> {
        let tape = self.tape(xs, taus);
        let scales = self.norm.scales();
        let n = self.state_dim();
        xs.iter()
            .zip(taus)
            .enumerate()
            .map(|(s, (x, &tau))| {
                let pi = tape.pi[s];
                let mut grad = self.constraint.gradient(x);
                for i in 0..n {
                    grad[i] += tau * tape.pidot[(i, s)] * scales[i];
                }
                ValueSample {
                    value: self.ell(x) + tau * pi,
                    grad_x: grad,
                    dv_dtau: pi + tau * tape.pidot[(n, s)] * scales[n],
                }
            })
            .collect()
    }

    pub fn forward_with_gradients(&self, x: &[f64], tau: f64) -> ValueSample {
        self.forward_batch(&[x], &[tau]).remove(0)
    }
}

impl ValueSource for ValueNet {
    fn evaluate(&self, x: &[f64], tau: f64) -> Result<ValueSample, ValueError> {
        if x.len() != self.state_dim() {
            return Err(ValueError::DimensionMismatch {
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        check_tau(tau, self.norm.horizon)?;
        Ok(self.forward_with_gradients(x, tau))
    }

    fn state_dim(&self) -> usize {
        ValueNet::state_dim(self)
    }

    fn horizon(&self) -> f64 {
        self.norm.horizon
    }
}

/// Per-sample discount: the system's virtual discount state if it has one,
/// otherwise `gamma`.
pub fn sample_gamma(system: &dyn ControlAffine, x: &[f64], gamma: f64) -> f64 {
    system.discount_index().map_or(gamma, |i| x[i])
}

/// The two branches of the variational inequality in time-to-go form:
/// `(ℓ − V, −∂V/∂τ + H(x, ∇ₓV) + γV)`.
pub fn vi_branches(
    system: &dyn ControlAffine,
    x: &[f64],
    ell: f64,
    sample: &ValueSample,
    gamma: f64,
) -> Result<(f64, f64), DynamicsError> {
    let xv = DVector::from_row_slice(x);
    let f = system.drift(&xv)?;
    let g = system.input_matrix(&xv)?;
    let p = &sample.grad_x;
    let v = g.transpose() * p;
    let h = p.dot(&f) + support(v.as_slice(), system.control_set());
    Ok((
        ell - sample.value,
        -sample.dv_dtau + h + gamma * sample.value,
    ))
}

/// `|min(ℓ − V, −∂V/∂τ + H + γV)|` at one sample.
pub fn vi_residual(
    source: &dyn ValueSource,
    system: &dyn ControlAffine,
    x: &[f64],
    tau: f64,
    gamma: f64,
) -> Result<f64, NetError> {
    let sample = source
        .evaluate(x, tau)
        .map_err(|e| NetError::Config(e.to_string()))?;
    let ell = system.constraint(&DVector::from_row_slice(x));
    let (b1, b2) = vi_branches(system, x, ell, &sample, sample_gamma(system, x, gamma))?;
    Ok(b1.min(b2).abs())
}
