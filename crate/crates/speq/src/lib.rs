//! Deterministic equivalents for resolvents of sample covariance matrices.
//!
//! The crate is organised bottom-up:
//!
//! - [`resolvent`]: sample covariance, resolvents and their exact identities.
//! - [`measure`]: atomic measures, sampled densities, Stieltjes transforms and
//!   Kolmogorov distances.
//! - [`equiv`]: the fixed-point functional and the deterministic equivalent.
//! - [`freeconv`]: the law `MP(gamma) ⊠ mu_Sigma` recovered from its transform.
//! - [`sim`]: seeded generation of data matrices.
//! - [`harness`]: Monte Carlo checks of the convergence rates.
//! - [`ridge`]: kernel ridge regression, random features and the effective ridge.

pub mod equiv;
pub mod error;
pub mod freeconv;
pub mod harness;
pub mod measure;
pub mod resolvent;
pub mod ridge;
pub mod sim;
pub mod tolerance;

pub use error::{Error, Result};
pub use resolvent::{Branch, SpectralParameter, C64};
