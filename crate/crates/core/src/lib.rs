//! Flow-guided temporal feature warping for video shadow detection.
//!
//! The crate is `no_std` (with `alloc`) and contains every numerical piece of
//! the pipeline: dense rank-4 tensors with hand-written forward/backward
//! kernels, the bilinear flow warp and per-channel feature combination, the
//! flow refinement network, the two-branch detector, the training recipe,
//! balanced-error-rate evaluation and a synthetic moving-shadow generator.
//!
//! File formats, dataset directories and the command-line tool live in the
//! `shadowflow` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod detector;
pub mod error;
pub mod eval;
pub mod flownet;
pub mod flowwarp;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod gradcheck;

pub use error::{Error, Result};
pub use flowwarp::{CombineWeights, FlowField};
pub use tensor::{Shape, Tensor4};
