// SPDX-License-Identifier: Apache-2.0

//! Latent interpretation tuning at toy scale.
//!
//! A decoder model learns to answer questions about a target model's
//! residual-stream activations; the same decoder then reads those
//! activations back ([`reader`]) and, used as a differentiable loss, steers
//! the target through a low-rank adapter ([`steer`]).

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod optim;
pub mod patching;
pub mod reader;
pub mod steer;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use autograd::{Tape, Var};
pub use error::{LitError, Result};
pub use patching::{capture, patched_decoder_forward, ActivationTensor};
pub use tensor::{Scalar, Tensor};
pub use transformer::{generate_greedy, CaptureSpec, LoraSpec, ModelConfig, PatchConfig, Span, TransformerModel};

/// Lowercase hexadecimal encoding.
pub fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
