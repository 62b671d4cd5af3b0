//! Retrieval-enhanced embedding refinement engine.
//!
//! Frozen dual-encoder embeddings are refined with cross-modal items fetched
//! from an external memory by uni-modal nearest-neighbour search, fused by a
//! small learned attention module trained contrastively. Synthetic encoder
//! worlds stand in for a real vision-text backbone so the whole mechanism is
//! testable on a desk.

pub mod bank;
pub mod eval;
pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod ivf;
pub mod loss;
pub mod gradcheck;
pub mod memory;
pub mod retrieval;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod training;
pub mod world;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision of the training and verification path.
pub type Real = f64;
/// Precision of on-disk embedding banks (storage only; promoted on load).
pub type StorageReal = f32;

/// Tensor used everywhere outside bank storage.
pub type TensorR = tensor::Tensor<Real>;
/// Tape used by training and gradient verification.
pub type TapeR = tape::Tape<Real>;
