//! Core algorithms for manifold-regularized sparse autoencoders on frozen
//! embedding matrices.
//!
//! This crate is `no_std` (alloc required) and has no float-environment
//! dependencies: all transcendental math goes through `libm`, and all
//! randomness through the seeded generators in [`rng`]. Results are therefore
//! bit-identical across platforms and runs, which the file formats in the
//! companion crate rely on.

#![no_std]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod annotate;
pub mod data;
pub mod diagnostics;
pub mod evaluate;
pub mod manifold;
pub mod matrix;
pub mod rng;
pub mod sae;

pub use matrix::Matrix;
