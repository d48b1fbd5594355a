//! Vision-transformer image reconstruction for denoising and inpainting.
//!
//! The generator is a ViT encoder whose classification head is replaced by a
//! per-patch reconstruction head. Four switches extend the vanilla model:
//! shifted patch tokenization, rotary position embeddings, locality
//! self-attention and an adversarial ViT discriminator.

pub mod attention;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;
pub mod vision;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
