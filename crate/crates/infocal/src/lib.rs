//! Rationale extraction by adversarial information calibration.
//!
//! The library trains a selector-predictor pair: the selector samples a
//! per-token binary-concrete mask over the input, the predictor classifies
//! from the masked tokens only, and the surviving tokens are the extracted
//! rationale. Three pressures shape the mask:
//!
//! - an information-bottleneck penalty that prices selected tokens against a
//!   sparse prior,
//! - an adversarial game against a guider network that sees the full input,
//!   so the predictor's features are calibrated to carry as much label
//!   information as the uncompressed ones,
//! - a pretrained continuous language model that charges for fragmented,
//!   disfluent selections.
//!
//! Everything runs on a small reverse-mode tape (`tape`) over dense `f32`
//! tensors, with an `f64` instantiation used by the gradient test suites.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod report;
pub mod tape;
pub mod tensor;
pub mod train;

pub use tensor::{Scalar, Tensor};
