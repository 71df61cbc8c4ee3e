//! Question paraphrase identification: a transformer encoder, a convolutional
//! condensing head and a softmax classifier over a small reverse-mode autodiff
//! engine.
//!
//! The guide under `book/` walks through each stage; its snippets are compiled
//! as doctests of this crate.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod layout;
pub mod params;
pub mod pipelines;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use autodiff::Tensor;
pub use config::{CnnConfig, EncoderConfig, HeadKind, ModelConfig, Precision, Setup};
pub use error::{CheckpointError, Error, Result};
pub use params::ParamRegistry;

// Each book chapter is a doctest module so the guide cannot drift from the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    mod tokenizer {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/heads.md")]
    mod heads {}
    #[doc = include_str!("../../../book/src/setups.md")]
    mod setups {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
