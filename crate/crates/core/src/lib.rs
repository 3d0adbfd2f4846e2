//! Data-free post-training weight quantization.
//!
//! Weights are rounded per output channel, then individual codes are flipped
//! by one grid step so that the signed sum of perturbations (CASE) of every
//! kernel and every output channel is driven to at most half a step. No
//! calibration data is involved.
//!
//! - [`quant`]: grid, scales, rounding, dequantization
//! - [`engine`]: the progressive flip engine
//! - [`oracle`]: brute-force minimizer, Gram decomposition, precise objective
//! - [`model_io`]: on-disk tensor and artifact containers
//! - [`eval`]: reference convolution and synthetic-model evaluation
//! - [`cli`]: command implementations behind the `squant` binary

pub mod cli;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model_io;
pub mod oracle;
pub mod quant;

pub use engine::{
    squant_tensor, squant_tensor_with, Execution, FlipRecord, QuantReport, QuantizedTensor,
};
pub use error::{Error, Result};
pub use quant::{LayerKind, Mode, QuantConfig, QuantGrid, WeightTensor};
