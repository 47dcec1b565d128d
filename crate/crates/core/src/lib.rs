//! Core building blocks for a position-guided deformable segmentation network:
//! a dense tensor type with reverse-mode automatic differentiation, standard and
//! modulated deformable 2-D convolution, coordinate operators, a noise-suppressing
//! loss family, a small UNet-style network assembly, synthetic data generation,
//! segmentation metrics, and a deterministic Adam training loop.
//!
//! The crate is `no_std`-compatible (requires `alloc`); all file and process I/O
//! lives in the companion CLI crate. Tensor bytes can still be encoded/decoded
//! here via [`pgdt`], which defines the on-disk layout without touching files.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checks;
pub mod coord;
pub mod data;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
mod parallel;
pub mod pgdt;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
