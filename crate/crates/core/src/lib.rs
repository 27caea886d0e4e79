//! Binary nucleus segmentation with a dual-branch encoder, attention-weighted
//! branch fusion and sample reweighting for channel independence, on a
//! float64 reverse-mode autodiff tape.
// Numeric kernels index several parallel buffers per loop.
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod cim;
pub mod config;
pub mod dac;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use cim::{CimConfig, SampleWeights};
pub use config::{RunConfig, RunOutcome};
pub use error::{Error, Result};
pub use losses::{LossConfig, MaskMap, MetricSummary};
pub use model::{build_model, Model, ModelConfig};
pub use synth::{Sample, SyntheticConfig};
pub use tensor::{grad_check, grad_check_many, Gradients, Reduce, Tape, Tensor, Var};
pub use train::{TrainConfig, TrainHistory};
