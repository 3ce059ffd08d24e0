//! Tactile input path: patch tokens per frame, frame pooling, the frozen
//! touch encoder and the trainable touch-to-language adapter.

mod clip;
mod encoder;

pub use clip::{num_patches, Sensor, TactileClip, CHANNELS, PATCH};
pub use encoder::{patchify, pool_video, EncoderConfig, TouchAdapter, TouchEncoder, PATCH_DIM};
