//! Dense linear algebra in double precision.

mod cholesky;
mod matrix;
mod svd;

pub use cholesky::{cholesky, cholesky_inverse, pseudo_inverse};
pub use matrix::{dot, norm2, Matrix};
pub use svd::{svd_full, svd_top_r, SvdResult};
