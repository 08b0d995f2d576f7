//! Sliding-window attention with sink tokens, fused with a long-term memory
//! whose weights are trained at test time, plus linear-memory baselines, an
//! analytic cost model and a desk-scale distillation harness.
//!
//! The guide in `book/` walks through each part; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod attention;
pub mod autodiff;
pub mod branch;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod linear;
pub mod memory;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors-and-tapes.md")]
    mod tensors_and_tapes {}
    #[doc = include_str!("../../../book/src/windowed-attention.md")]
    mod windowed_attention {}
    #[doc = include_str!("../../../book/src/fast-weight-memory.md")]
    mod fast_weight_memory {}
    #[doc = include_str!("../../../book/src/token-mixer.md")]
    mod token_mixer {}
    #[doc = include_str!("../../../book/src/linear-baselines.md")]
    mod linear_baselines {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
