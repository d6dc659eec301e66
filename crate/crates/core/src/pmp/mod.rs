//! Boundary sampling from abnormal extremals of the maximum principle.
//!
//! Trajectories that barely stay inside the safe set are found by solving
//! for tangential touch points on `h(x) = 0` and integrating the
//! state–costate equations backward from there.

mod dataset;
mod extremal;
mod maximizer;
mod terminal;

use thiserror::Error;

use crate::dynamics::DynamicsError;

pub use dataset::{
    boundary_extremals, generate_dataset, generate_dataset_from, DatasetConfig, MixRatios,
    PmpSamplingOptions, PmpStamp, Sample, SampleBatch, SampleSource,
};
pub use extremal::{
    default_ham_tol, integrate_extremal_backward, integrate_extremal_backward_with, Extremal,
    ExtremalOptions,
};
pub use maximizer::{closed_form_maximizer, hamiltonian, support, SINGULAR_TOL};
pub use terminal::{
    solve_terminal_conditions, terminal_residuals, StepRule, TerminalOptions, TerminalResiduals,
    TerminalSolveReport,
};

#[derive(Debug, Error)]
pub enum PmpError {
    #[error("maximizer is not unique: |v| = {norm:e}")]
    SingularDirection { norm: f64 },
    #[error("hamiltonian drift {value:e} exceeds {tol:e} at step {step}")]
    IntegrationDrift { step: usize, value: f64, tol: f64 },
    #[error("only {found} boundary points converged, {needed} needed")]
    InsufficientBoundaryPoints { found: usize, needed: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}
