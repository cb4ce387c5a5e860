//! Files, corpora and the command-line pipeline around `bytepatch-core`.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod tasks;
pub mod vocab_io;

pub use error::{Error, Result};
