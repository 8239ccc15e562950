//! Joint self-supervised learning of image and point-cloud features from
//! cross-modality and cross-view correspondences.
//!
//! This crate is `no_std` (with `alloc`) and contains every numeric piece of
//! the pipeline: mesh geometry, a Phong rasterizer, surface sampling with
//! farthest point sampling, a reverse-mode autodiff engine, the three
//! encoders, the losses, dataset assembly, optimizers and evaluation
//! protocols. File formats, parallel drivers and the command line live in the
//! `crossmodal` crate.
#![no_std]
#![deny(unsafe_code)]
// Guards like `!(x > 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod datasets;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod geom;
pub mod mesh;
pub mod objectives;
pub mod pointcloud;
pub mod render;
pub mod trainer;

pub use error::{Error, Result};

/// Seedable random source used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's random source from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    <Rng as rand::SeedableRng>::seed_from_u64(seed)
}

/// Derives an independent stream seed from a root seed and a stream id.
///
/// SplitMix64 finalizer over the pair, so neighbouring ids give unrelated
/// streams.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
