//! Multimodal (speech, text, motion-capture) emotion classification with
//! per-modality networks and late fusion of their penultimate layers.
//!
//! Everything runs on a small in-crate tensor/autodiff engine in `f64`.

pub mod audio;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod featfile;
pub mod gradcheck;
pub mod harness;
pub mod mocap;
pub mod nn;
pub mod tensor;
pub mod text;
pub mod zoo;

pub use autodiff::{Graph, Var};
pub use data::{Emotion, Modality};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Number of emotion classes.
pub const NUM_CLASSES: usize = 4;
