//! Mixture-of-layers transformer, CPU reference implementation.
//!
//! The model interleaves ordinary dense transformer layers with *split
//! stages*: banks of narrow residual blocks (thin blocks) selected per token
//! by a learned router. Thin blocks wrap a standard attention + FFN block
//! between a down- and an up-projection and contribute weighted deltas to the
//! full-width residual stream. Attention inside a block is either causal
//! softmax attention with RoPE or a gated delta-rule recurrence.
//!
//! Everything runs on a small reverse-mode autodiff graph ([`graph::Graph`])
//! over flat row-major tensors ([`tensor::Tensor`]), generic over `f32`/`f64`.
//! Kernels are data-parallel via rayon when the `parallel` feature is on and
//! fall back to identical sequential loops otherwise; both paths produce
//! bitwise-equal results because parallelism only splits disjoint output
//! regions.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod delta;
pub mod graph;
pub mod infer;
pub mod kernels;
pub mod mac;
pub mod model;
pub mod parallel;
pub mod router;
pub mod stage;
pub mod tensor;
pub mod train;

pub use graph::{Graph, Var};
pub use tensor::{Error, Real, Result, Tensor};
