//! Learned predictive safety filters from boundary-sampled control barrier
//! value functions.
//!
//! The crate is organised bottom-up:
//!
//! - [`dynamics`]: control-affine systems, track geometry and the implicit
//!   input-box construction.
//! - [`pmp`]: closed-form maximizer, terminal-point solve and backward
//!   state–costate integration producing boundary-hugging trajectories.
//! - [`hj_grid`]: exact grid solver for low-dimensional value functions.
//! - [`value_net`]: neural value function with analytic input gradients and
//!   variational-inequality residual training.
//! - [`filter`]: the minimally invasive QP filter.
//! - [`eval`]: failure rate, IOU and multi-seed sweeps.
//! - [`sim`]: real-time shared-control sessions, telemetry and replay.

pub mod dynamics;
pub mod eval;
pub mod filter;
pub mod hj_grid;
pub mod pmp;
pub mod sim;
pub mod value_net;
pub mod value_source;
