//! Desk-scale post-training pruning laboratory.
//!
//! The crate bundles everything needed to study how the choice of calibration
//! data steers post-training pruning of a decoder-only transformer:
//!
//! * [`numerics`]: dense matrices, one-sided Jacobi SVD, Cholesky inverse, pseudo-inverse.
//! * [`toymodel`]: a tiny pre-norm transformer with hidden-state and FFN activation capture.
//! * [`corpus`]: synthetic Markov "languages" and equal-share calibration mixing.
//! * [`pruner`]: magnitude, Wanda and SparseGPT under unstructured or N:M sparsity.
//! * [`metrics`]: perplexity, normalized pruning error and SNR.
//! * [`analysis`]: low-rank language subspaces, pruning-mask IoU and activation entropy.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled (the
//! default). Results never depend on the execution mode; see [`par`].

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod par;
pub mod pruner;
pub mod seed;
pub mod toymodel;

pub use error::{Error, Result};
pub use numerics::Matrix;
