//! Cross-lingual denoising sequence-to-sequence pretraining at desk scale.

pub mod autograd;
pub mod corpus;
pub mod error;
pub mod model;
pub mod noise;
pub mod objectives;
pub mod probes;
pub mod rng;
pub mod tensor;
pub mod translate;

pub use error::{Error, Result};
