//! Convolution-enhanced evolving attention networks for time-series
//! representation learning.
//!
//! The crate is `no_std` (with `alloc`). It carries the whole numerical
//! pipeline: a reverse-mode differentiation tape over dense `f64` tensors,
//! the neural kernels (masked softmax, layer norm, attention-map
//! convolutions, dilated 1-D convolutions), the evolving-attention
//! mechanism, EA-Transformer / EA-DC-Transformer models with their task
//! heads, optimizers and a deterministic training loop, synthetic data,
//! and evaluation metrics. File formats and the command line live in the
//! `eanet` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod data;
mod error;
pub mod gradcheck;
mod linalg;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Deterministic generator used for every random draw in the crate.
pub type SeedRng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeedRng {
    use rand::SeedableRng;
    SeedRng::seed_from_u64(seed)
}
