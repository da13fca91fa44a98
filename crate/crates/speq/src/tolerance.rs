//! Numerical thresholds shared across the crate.
//!
//! Absolute thresholds are applied after scaling by `max(1, |scale|)` of the
//! quantity being compared.

/// Largest allowed `|K_ij - K_ji|` (relative to the largest entry).
pub const SYMMETRY: f64 = 1e-10;

/// Eigenvalues within this (relative) distance of zero are snapped to zero;
/// anything more negative is rejected as not PSD.
pub const PSD_CLAMP: f64 = 1e-10;

/// `||Q diag(lambda) Q^T - K||_F <= EIGEN_RECONSTRUCTION * ||K||_F`.
pub const EIGEN_RECONSTRUCTION: f64 = 1e-9;

/// Guard on `|1 + v^T M^{-1} u|` and `|1 + x^T G_- x / n|`.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-14;

/// Allowed deviation of `||u||` from 1.
pub const UNIT_VECTOR: f64 = 1e-12;

/// Atoms closer than this are merged.
pub const ATOM_MERGE: f64 = 1e-10;

/// Allowed deviation of total mass from 1 for atomic measures.
pub const ATOMIC_MASS: f64 = 1e-12;

/// Allowed deviation of total mass from 1 for sampled densities.
pub const DENSITY_MASS: f64 = 5e-3;

/// Negative density values down to this magnitude are clamped to zero.
pub const DENSITY_NEGATIVE: f64 = 1e-12;

/// Default relative tolerance and iteration cap of the fixed-point solver.
pub const FIXED_POINT_TOL: f64 = 1e-12;
pub const FIXED_POINT_MAX_ITER: usize = 100_000;

/// Slack on membership tests for the domain Omega, relative to `|z|`.
pub const OMEGA_SLACK: f64 = 1e-12;

/// Agreement required between the two effective-ridge characterizations.
pub const RIDGE_AGREEMENT: f64 = 1e-8;
