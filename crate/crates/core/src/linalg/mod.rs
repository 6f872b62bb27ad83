//! Dense linear algebra used across the pipeline.

mod matrix;
pub mod solve;
pub mod svd;

pub use matrix::{cosine_distance, cosine_similarity, dot, norm, Matrix};
pub(crate) use matrix::gemm_into;
pub use svd::{compose, orthogonality_error, reconstruction_error, svd, SvdFactors};
pub use solve::{cholesky, solve_spd};
