//! Tokenizer-free sequence modeling with entropy-patched byte adapters.
//!
//! Raw bytes are segmented into patches, pooled by a small local encoder,
//! projected into the width of a pretrained transformer body, and decoded
//! back to bytes by a local decoder that cross-attends to the body's
//! outputs. The body can be frozen while the adapter trains, and later
//! only its attention weights can be unfrozen.
//!
//! This crate is `no_std` and needs only `alloc`. Enable the `std`
//! feature for runtime CPU feature detection in the matrix kernels.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod body;
pub mod bpe;
pub mod decoder;
pub mod encoder;
pub mod entropy_lm;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod patching;
pub mod params;
pub mod rng;
pub mod teacher;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{AttnSpec, Graph, Rope, Var};
pub use params::{Gradients, ParamId, ParamPartition, ParamStore};
pub use tensor::Tensor;
