//! Distance-decay self-attention and a compact hierarchical vision backbone,
//! built on a minimal deterministic f64 tensor core with reverse-mode
//! differentiation.
//!
//! The crate is organized around six pieces:
//!
//! - [`tensor`]: dense tensors, deterministic forward kernels, and a
//!   finite-difference oracle.
//! - [`tape`]: a reverse-mode gradient tape over those kernels.
//! - [`decay`]: spatial distance/decay matrices (Euclidean, Manhattan,
//!   Minkowski, RBF kernels) and per-head decay schedules.
//! - [`attention`]: standard, decayed, decomposed, grouped, and dilated
//!   attention variants plus exact cost accounting.
//! - [`model`]: the full block stack, variant configs, parameter/FLOP
//!   counting, weight serialization, and a toy training loop.
//! - [`analysis`]: divergence protocols, spatial entropy, coordinate
//!   gradients, receptive-field theory, and attention rollout.

pub mod analysis;
pub mod attention;
pub mod decay;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod textio;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
