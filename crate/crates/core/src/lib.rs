//! Kernel lab for sparsified video-transformer inference.
//!
//! Three coordinated mechanisms act on a spatio-temporal token grid:
//! cube-local token merging with an exact unmerge ([`merge`]), masked and
//! cube-sparse attention ([`attention`]), and an entropy-driven allocator that
//! spreads a per-step sparsity budget across layers ([`policy`]). A FLOP model
//! ([`cost`]), a toy multi-layer pipeline ([`pipeline`]) and a timing harness
//! ([`bench`]) tie them together.
//!
//! The numeric kernels are generic over [`Scalar`]; the aliases below fix the
//! two instantiations used in practice.

pub mod attention;
pub mod bench;
pub mod cost;
pub mod cube;
pub mod error;
pub mod fixtures;
pub mod matrix;
pub mod merge;
pub mod pipeline;
pub mod policy;
pub mod scalar;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;

/// Storage precision: grids, files and the pipeline.
pub type Matrix32 = matrix::Matrix<f32>;
/// Reference precision used by oracles and calibration runs.
pub type Matrix64 = matrix::Matrix<f64>;
pub type Projections32 = attention::Projections<f32>;
pub type Projections64 = attention::Projections<f64>;
pub type AttentionOutput32 = attention::AttentionOutput<f32>;
pub type AttentionOutput64 = attention::AttentionOutput<f64>;
