//! Group-wise learnable rational activations with structured low-rank
//! adaptation of their coefficients, plus the supporting pieces needed to
//! study them end to end: a small f64 autodiff engine, a rational-fitting
//! toolkit, desk-scale models and a deterministic training harness,
//! stability diagnostics, and a config-driven experiment runner.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod experiment;
pub mod fit;
pub mod lora;
pub mod model;
pub mod nora;
pub mod rational;
pub mod tensor;
pub mod train;
pub mod util;

pub use tensor::{Tape, Tensor, TensorError, Var};
