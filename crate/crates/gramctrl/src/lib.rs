//! Data-driven output-feedback stabilization of continuous-time autoregressive
//! systems from noisy input-output trajectories.
//!
//! The library embeds sampled trajectories into Gram matrices of synthesis
//! operators, characterizes the set of data-consistent systems through a
//! quadratic matrix inequality, and decides informativity for quadratic
//! stabilization by solving a strict LMI. A feasible solution yields a
//! dynamic output-feedback controller valid for every consistent system.
//! In the noise-free case the same machinery identifies the system exactly,
//! either through operator Gram matrices or through B-spline approximations
//! of the data operators.

// Force linkage of the system BLAS/LAPACK backing the SDP solver.
use openblas_src as _;

pub mod gram;
pub mod informativity;
pub mod sdp;
pub mod signals;
pub mod sim;
pub mod splines;
pub mod stability;
