//! CAST attention: clustering attention with surrogate tokens, on a minimal
//! dense tensor kernel with reverse-mode automatic differentiation.
//!
//! The crate provides the kernel ([`tensor`], [`tape`], [`meter`]), the two
//! clustering mechanisms ([`clustering`]), the single- and multi-head layers
//! ([`layer`], [`multihead`]), independent oracles and checkers ([`verify`]),
//! a benchmark harness ([`bench`]), and file I/O for parameters and score
//! maps ([`io`]).

pub mod bench;
pub mod cli;
pub mod clustering;
pub mod error;
pub mod io;
pub mod layer;
pub mod meter;
pub mod multihead;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use clustering::{ClusterAssignment, Mechanism};
pub use error::{CastError, Result};
pub use layer::{forward, AttentionFn, CastConfig, CastParams};
pub use multihead::mh_forward;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
