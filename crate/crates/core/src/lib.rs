//! Multi-scale windowed attention, a `d_state = 1` selective scan, and their
//! fusion into an attention-augmented state space token mixer, together with
//! the four-stage backbone and segmentation decoder built from them.
//!
//! Everything runs on a small `f64` tensor type with recorded-graph
//! reverse-mode differentiation ([`Tape`], [`Var`]).

pub mod a2ssm;
pub mod attention;
pub mod autograd;
pub mod block;
pub mod decoder;
pub mod error;
pub mod fdcheck;
mod gemm;
pub mod layers;
pub mod memtrack;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod scan;
pub mod tensor;

pub use autograd::{Grads, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
