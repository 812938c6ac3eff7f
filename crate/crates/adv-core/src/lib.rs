#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod codec;
pub mod env;
pub mod metrics;
pub mod verifier;
pub mod model;
pub mod rng;

/// A sequence of non-negative token ids.
pub type TokenSeq = alloc::vec::Vec<u32>;
