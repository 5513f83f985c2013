//! Synchronous bidirectional sequence transduction.
//!
//! A small, dependency-light Transformer whose single decoder produces a
//! left-to-right and a right-to-left output at the same time. The two
//! directions exchange information through a synchronous bidirectional
//! attention layer, are trained with one joint objective, and are decoded
//! with one paired beam search.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and a tape-based reverse-mode autodiff.
//! * [`attention`]: scaled dot-product, multi-head and synchronous
//!   bidirectional attention with linear / nonlinear / gated fusion.
//! * [`model`]: encoder, dual-stream decoder, embeddings and parameters.
//! * [`training`]: triples, joint loss, Adam with warmup, checkpoints.
//! * [`decoding`]: greedy, beam and synchronous bidirectional beam search.
//! * [`harness`]: synthetic tasks, BLEU and accuracy reports, the CLI.

#![deny(unsafe_code)]

pub mod attention;
pub mod decoding;
mod error;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
