//! Per-channel static quantization toolkit for small transformer blocks.
//!
//! The crate covers the full offline pipeline: activation calibration,
//! quantization step migration into norms and weights ([`qsm`]), scale
//! splitting with structured pruning ([`dimrec`]), clip-ratio search
//! ([`clip`]), low-rank error compensation ([`compensate`]), and the
//! orchestration/benchmark layer in [`pipeline`]. Everything runs on the
//! small dense [`Tensor`] type in fp64 so that exactness oracles can be
//! checked directly.
//!
//! Inner loops are data-parallel through rayon when the `parallel` feature is
//! enabled (the default); see [`exec`] for the runtime switch.

pub mod clip;
pub mod compensate;
pub mod container;
pub mod dimrec;
mod error;
pub mod exact_sum;
pub mod exec;
pub mod pipeline;
pub mod qsm;
pub mod quant;
pub mod tensor;
pub mod toymodel;

pub use error::{Error, Result};
pub use tensor::{DType, NormKind, NormParams, Tensor};

/// Toolkit version echoed into every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
