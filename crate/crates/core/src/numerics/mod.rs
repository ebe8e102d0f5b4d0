//! Dense real linear algebra and deterministic random streams.
//!
//! All operations are pure functions of their inputs; the only mutable state
//! is the explicit counter inside [`RngStream`], which callers advance by
//! value or fork via [`RngStream::child`].

mod eigen;
mod matrix;
mod rng;
mod solve;
mod stats;

pub use eigen::{least_eigenvalue, sym_eig, SymEig};
pub use matrix::Matrix;
pub(crate) use matrix::dot;
pub use rng::{gaussian_draw, RngStream};
pub use solve::solve_spd;
pub use stats::fit_loglog_slope;

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
/// Monte Carlo kernels are symmetric only up to floating-point noise, so
/// inputs within this tolerance are symmetrized via `(M + M^T)/2`.
pub const SYMMETRY_TOL: f64 = 1e-9;
