//! Attention-guided object masking.
//!
//! A dual encoder scores an image against a caption; when the score clears a
//! gate, Grad-CAM over the encoder's last convolutional layer yields an
//! attention map, which is turned into point or box prompts for a promptable
//! segmenter. The evaluation module provides IoU, F1-optimal thresholds and
//! top-k accuracy.

pub mod adapter;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcam;
pub mod nn;
pub mod pipeline;
pub mod prompting;
pub mod seed;
pub mod segmenter;

pub use error::{Error, Result, Stage};
