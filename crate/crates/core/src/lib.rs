//! Masked discrete diffusion over `h x w x d` token tensors.
//!
//! Continuous encoder features are quantized dimension by dimension into
//! discrete levels. A bidirectional transformer learns to predict masked
//! entries of the resulting token tensor, and generation starts from a fully
//! masked tensor and reveals entries over a fixed number of cosine-scheduled
//! steps.

pub mod checkpoint;
mod codec;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod masking;
pub mod predictor;
pub mod quantizer;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{count_masked, flat_index, FeatureTensor, MaskTensor, Shape3, TokenTensor};
