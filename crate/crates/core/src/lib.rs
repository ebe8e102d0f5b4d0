//! Numerical laboratory for a stochastic latent-layer network and its three
//! tangent kernels.
//!
//! The crate is organised around the experiment pipeline:
//!
//! * [`numerics`] — dense matrices, a symmetric eigensolver, SPD solves and
//!   counter-based random streams; everything downstream is deterministic in
//!   the master seed.
//! * [`dataset`] — unit-norm encoded inputs, synthetic or derived from IDX
//!   image files through a frozen random encoder.
//! * [`snn`] — the stochastic network itself: reparameterized forward pass,
//!   Monte Carlo expected outputs and explicit per-group output gradients.
//! * [`ntk`] — empirical and limiting tangent kernels, Kronecker-structure
//!   diagnostics and kernel distances.
//! * [`train`] — objectives, full-batch gradient descent and the trajectory
//!   diagnostics (convergence bound, loss-rate identity, weight drift).
//! * [`krr`] — the kernel ridge regression predictor the trained network is
//!   compared against.

pub mod dataset;
pub mod error;
pub mod krr;
pub mod ntk;
pub mod numerics;
pub mod snn;
pub mod train;

pub use error::{Error, Result};
