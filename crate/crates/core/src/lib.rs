//! Recurrent variational network for accelerated multi-coil MRI.
//!
//! The crate covers the k-space operators, sampling masks, coil sensitivity
//! estimation and refinement, the unrolled network, its training loop, quality
//! metrics, a synthetic data simulator and the `rvarnet` command-line tool.

mod binio;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod operators;
pub mod real;
pub mod sampling;
pub mod seed;
pub mod sensitivity;
pub mod tensor;
pub mod training;

pub use config::{Config, DataConfig, ModelConfig, RsiInput, SamplingConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{model_forward, ModelInput, ModelOutput, RecurrentVarNet};
pub use operators::{CoilSensitivityMaps, Image, MultiCoilKSpace};
pub use sampling::{MaskKind, SamplingMask};
