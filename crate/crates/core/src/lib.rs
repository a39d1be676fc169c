//! Masked gated linear units.
//!
//! A gated feed-forward layer normally reads two weight matrices per token.
//! Here a single shared matrix is partitioned into gate and value streams by
//! learnable binary masks and their complements, and a fused split-K
//! matrix-vector kernel evaluates every masked projection in one pass over
//! the weights, with the masks bit-packed one word per element.
//!
//! The crate provides:
//! - naive reference forwards for the whole layer family ([`reference`]),
//! - the fused kernel with traffic instrumentation ([`kernel`]),
//! - hand-derived gradients with straight-through mask updates and a
//!   finite-difference harness ([`autograd`]),
//! - a seeded teacher-student training loop ([`trainer`]),
//! - closed-form memory/parameter/FLOP accounting ([`analysis`]),
//! - a binary layer file format ([`io`]).

pub mod activation;
pub mod analysis;
pub mod autograd;
pub mod error;
pub mod io;
pub mod kernel;
pub mod layer;
pub mod masks;
pub mod real;
pub mod reference;
pub mod tensor;
pub mod trainer;

pub use activation::Activation;
pub use error::{MgluError, Result};
pub use kernel::{KernelConfig, PartialSums, TrafficReport};
pub use layer::{MgluLayer, Router};
pub use masks::{pack_masks, ste_binarize, unpack_masks, BinaryMask, MaskLogits, PackedMasks};
pub use real::{Precision, Real};
pub use tensor::{DenseMatrix, DenseVector, StorageWidth};
