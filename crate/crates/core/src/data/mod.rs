//! Synthetic video/audio/text streams with a controllable shared latent,
//! video augmentation and triplet batch assembly.

mod augment;
mod batch;
pub mod fixture;
mod synthetic;

pub use augment::{apply as apply_augmentation, augment_video, crop_resize, sample_params, AugmentConfig, AugmentParams, CropBox};
pub use batch::{Location, TripletBatch, MIL_POSITIVES};
pub use synthetic::{nearest_text_clips, ClipSample, Stream, SyntheticSpec, SyntheticWorld};
