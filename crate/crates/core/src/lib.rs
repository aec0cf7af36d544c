//! A desk-scale laboratory for next-implicit-token prediction (NITP).
//!
//! NITP augments next-token cross-entropy with an auxiliary loss: the final
//! hidden state at position `t`, passed through a small projection head, is
//! pulled toward the (frozen) shallow-layer representation of token `t+1`
//! under a cosine loss. This crate contains everything needed to train such a
//! model at toy scale and to check the accompanying geometry:
//!
//! - [`autograd`]: tensors, reverse-mode autodiff and a stop-gradient node
//! - [`model`]: a decoder-only transformer with dense or top-k MoE FFNs
//! - [`objectives`]: next-token and implicit-token losses plus ablation arms
//! - [`probes`]: effective rank and average pairwise cosine
//! - [`theory`]: closed-form gradient/Hessian of the cosine loss and their
//!   finite-difference oracles
//! - [`flops`]: per-token training FLOPs and the NITP overhead ratio
//! - [`train`]: corpus, optimizer, schedule, training loop, logs and runs
//!
//! The guide in `book/` walks through each of these with runnable listings.

pub mod autograd;
pub mod error;
pub mod flops;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod probes;
pub mod tensor;
pub mod tensorfile;
pub mod theory;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
