//! Highlighted-guidance decoding engine.
//!
//! A desk-scale decoder-only transformer plus the machinery for steering it
//! with a token-level highlight mask: a two-branch classifier-free guidance
//! loop, additive attention activation in every self-attention layer, a
//! small query-transformer vision path, and attention probes.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the HTTP
//! service and the CLI live in the companion `highlighter` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod activation;
pub mod context;
pub mod error;
pub mod guidance;
pub mod highlight;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod rng;
pub mod tokenizer;

pub use error::{Error, Result};
