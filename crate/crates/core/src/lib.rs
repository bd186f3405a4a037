//! Knowledge distillation for multi-label image classification.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]),
//! sequential CNNs with teacher/student presets ([`nn`]), the focal-BCE and
//! temperature-scaled MSE loss stack ([`losses`]), AdamW training and the
//! distillation loop ([`train`]), Grad-CAM ([`gradcam`]), multi-label metrics
//! and teacher–student quadrant analysis ([`metrics`]), a synthetic dataset
//! with ground-truth boxes ([`data`]) and a latency benchmark ([`bench`]).

pub mod bench;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
