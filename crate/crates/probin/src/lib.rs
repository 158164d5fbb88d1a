//! Numerical laboratory for the principal eigenvalue of the p-Laplacian with
//! mixed Dirichlet–Robin boundary conditions.
//!
//! The crate covers five connected studies on one discretization stack:
//! forward eigenpair solves (interval, radial and planar meshes), thin-coating
//! two-phase asymptotics, linearized sensitivity of the eigenvalue in the
//! Robin coefficient, reconstruction of an unknown Robin coefficient from
//! boundary data, and limit scans in the exponent p.

// Kept on purpose: `!(x > y)` rejects NaN where `x <= y` would accept it,
// and assembly loops index several parallel per-element arrays.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod domain;
pub mod eigensolver;
pub mod error;
pub mod inverse;
pub mod limits;
pub mod linalg;
pub mod sensitivity;

pub use error::{Error, Result};
