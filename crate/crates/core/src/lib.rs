//! Entropy-guided layerwise ultra-low-bit quantization.
//!
//! The pipeline profiles the activation entropy of every layer of a
//! transformer stack, orders layers from least to most entropic, and moves
//! the first `k` of them to a ~1-bit binarized format while the rest are
//! quantized to 4 bits.
//!
//! * [`container`]: the `.luqc` file format and synthetic stacks.
//! * [`net`]: forward execution and activation capture.
//! * [`calib`]: mixed-modal calibration sets.
//! * [`entropy`]: k-means discretization, entropy, rank stability.
//! * [`quant`]: RTN, GPTQ and residual binarization backends.
//! * [`select`]: threshold, binary-search and budget selection of `k`.
//! * [`eval`]: scoring metrics and ablation drivers.

pub mod calib;
pub mod container;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod net;
pub mod quant;
pub mod select;
pub mod tensor;

pub use error::{LuqError, Result};
