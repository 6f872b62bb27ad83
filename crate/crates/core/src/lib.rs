//! Speaker-identity leakage laboratory.
//!
//! Generates a synthetic multi-speaker corpus, trains a speaker-adapted
//! transformer recognizer, extracts speaker embeddings from it by iterative
//! gradient-sign perturbation of noise input, sanitizes them by SVD factor
//! transplant, synthesizes speech from them, and scores leakage with
//! speaker-verification metrics.
//!
//! Numeric code is generic over [`Scalar`]; the aliases at the crate root fix
//! the precision the pipeline uses (`f32` for networks, `f64` for
//! decompositions and metrics).

pub mod asr;
pub mod attack;
pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod synthesis;
pub mod svd_transfer;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use scalar::Scalar;

/// Matrix precision used for network weights, features and activations.
pub type Real = f32;
/// Precision for decompositions and detection metrics.
pub type Precise = f64;

pub type Mat = Matrix<Real>;
pub type PreciseMat = Matrix<Precise>;
