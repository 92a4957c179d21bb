//! Instruction-conditioned channel modulation (MoDA) of language-aligned
//! visual tokens inside a small, fully differentiable multimodal LM.

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod moda;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
