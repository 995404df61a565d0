//! Condition-aware self-supervised speech models trained on a synthetic
//! multilingual corpus: a small reverse-mode autodiff engine, an encoder with
//! pluggable CC/TCAC conditioners, ASR/LID/SV decoders, losses and metrics,
//! and a staged training harness.

pub mod autodiff;
pub mod conditioner;
pub mod decoders;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
