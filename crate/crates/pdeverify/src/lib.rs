//! Grid verification of exact density tracking.
//!
//! A target density on a box is evolved by the zero-flux heat flow. The
//! reverse path is then reproduced by a driftless control system: at each
//! step the potential `φ` solves `𝒜φ = ∂_t p^ref` with the sub-Laplacian
//! `𝒜 = Σ Y_i* Y_i` of the input fields, and the density is advected by the
//! feedback `u_i = Y_i φ / p`.

mod error;
pub mod grid;
pub mod operator;
pub mod solve;
pub mod sparse;
pub mod tracking;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{heat_step, laplacian, Boundary, Grid, GridField, TargetDensity};
pub use operator::{assemble_sub_laplacian, FacePolicy, SubLaplacian};
pub use solve::{solve_poisson_zero_mean, spectral_gap, CgOptions, CgReport, SpectralReport};
pub use sparse::SparseOperator;
pub use tracking::{exact_tracking_run, exact_tracking_run_observed, liouville_step, TrackingReport};
pub use verify::{run_case, Check, PdeConfig, VerifyReport};
