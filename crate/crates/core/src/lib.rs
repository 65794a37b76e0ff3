//! Convolution-free video-audio-text Transformer trained with multimodal
//! contrastive objectives, built on a small reverse-mode tensor engine.

pub mod data;
pub mod encoder;
pub mod error;
pub mod evalbench;
pub mod heads;
pub mod losses;
pub mod numerics;
pub mod params;
pub mod tokenizers;
pub mod training;

pub use error::{Error, Result};
