//! FPPformer: a hierarchical patch-pyramid transformer for long-horizon
//! time-series forecasting.
//!
//! The crate is self-contained: [`tensor`] provides a tape-based reverse-mode
//! autodiff engine over dense `f64` tensors, [`attention`] the masked
//! element-wise and patch-wise attention blocks, [`model`] the bottom-up
//! encoder / top-down decoder assembly, [`data`] windowing and RevIN, and
//! [`train`] the training loop, metrics and ablation runner. The `fppformer`
//! binary drives all of it from a flat config file.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Fppformer, ModelConfig, Variant};
pub use tensor::{Tape, Tensor, Var};
