//! Retrieval-conditioned cross-view image synthesis.
//!
//! A frozen two-branch retrieval embedder maps aerial and ground images into a
//! shared space. Its embedding conditions a two-stage generator through
//! attentional AdaIN, and one-way conditional discriminators score realism and
//! location match jointly.

pub mod attn_adain;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod embedder;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod seed;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use autograd::{Grads, Var};
pub use error::{Error, Result};
pub use params::{Adam, AdamConfig, Ctx, Param, ParamStore};
pub use tensor::Tensor;
