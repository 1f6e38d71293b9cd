//! Diffusion-model feedback control for driftless control-affine systems.
//!
//! A target density is noised by a reflected forward SDE ([`forward`]); a
//! neural feedback law ([`policy`]) is then trained so that the control
//! system, run as the reverse process ([`reverse`]), retraces the forward
//! density path backwards in time. Densities are represented by particle
//! ensembles and compared with a kernel-regularized KL estimator
//! ([`divergence`]).

pub mod divergence;
mod ensemble;
mod error;
pub mod forward;
pub mod kernel;
pub mod policy;
pub mod reverse;
pub mod rng;
pub mod sampling;
pub mod systems;
mod timegrid;

pub use ensemble::{BoxDomain, Ensemble};
pub use error::{Error, Result};
pub use kernel::KernelConfig;
pub use sampling::{GaussianSpec, InitialDistribution};
pub use timegrid::TimeGrid;
