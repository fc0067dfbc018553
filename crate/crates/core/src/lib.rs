//! Joint measurability and uniqueness of joint measurements for tuples of
//! quantum measurements (POVMs), with extremality and boundary
//! classification in the sets of general and compatible tuples.

use openblas_src as _;

pub mod cli;
pub mod conic;
pub mod decomp;
pub mod error;
pub mod fixtures;
pub mod herm;
pub mod joint;
pub mod povm;
pub mod unique;

pub use error::{Error, Result, Violation};

/// Equality residual target (Frobenius).
pub const EPS_EQ: f64 = 1e-8;
/// Allowed negativity of eigenvalues in PSD checks.
pub const EPS_PSD: f64 = 1e-8;
/// Objective threshold separating a genuine perturbation direction from zero.
pub const EPS_UNIQUE: f64 = 1e-6;
/// Relative singular-value cutoff for support and null-space decisions.
pub const EPS_RANK: f64 = 1e-9;
/// Accepted residual of an infeasibility (dual ray) certificate.
pub const CERTIFICATE_TOL: f64 = 1e-7;
/// Default threshold on the max-min-eigenvalue joint for boundary decisions.
pub const S_STAR_TOL: f64 = 1e-6;
